from rainbowssd.cli import entrypoint

entrypoint()
