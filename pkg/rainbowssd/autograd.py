"""
Reverse-mode gradient recording for the fixed op set in `rainbowssd.ops`.

Ops executed while a `GradTape` is active append a `TapeEntry` holding a pure
recompute closure and a backward closure. `backward` walks the entries in
reverse and accumulates gradients for every tensor that took part.
"""
import dataclasses
import logging
from typing import Callable, Dict, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np

from rainbowssd.exceptions import DimensionError, GradientLookupError
from rainbowssd.tensor import Tensor, Tensor4

LOGGER = logging.getLogger(__name__)

BackwardFn = Callable[[np.ndarray, Tuple[bool, ...]], Sequence[Optional[np.ndarray]]]

_TAPE_STACK: List["GradTape"] = []


@dataclasses.dataclass
class TapeEntry:
    """A single recorded op application"""

    op: str
    inputs: Tuple[Tensor, ...]
    output: Tensor
    forward: Callable[[], np.ndarray]
    backward: BackwardFn


class Gradients:
    """
    Gradient set returned by `backward`. Indexing with any tensor recorded on
    the tape returns d(target)/d(tensor); tensors the target does not depend on
    get zeros. Tensors that never appeared on the tape raise
    GradientLookupError.
    """

    def __init__(self, tape: "GradTape", grads: Dict[int, np.ndarray]) -> None:
        self._tape = tape
        self._grads = grads

    def __getitem__(self, tensor: Tensor) -> np.ndarray:
        if not self._tape.watched(tensor):
            raise GradientLookupError(f"{tensor!r} was not recorded on the tape")
        grad = self._grads.get(id(tensor))
        if grad is None:
            return np.zeros_like(tensor.data)
        return grad

    def __contains__(self, tensor: Tensor) -> bool:
        return self._tape.watched(tensor)

    def get(self, tensor: Tensor) -> Optional[np.ndarray]:
        """Like __getitem__ but returns None for unrecorded tensors"""
        if not self._tape.watched(tensor):
            return None
        return self[tensor]


class GradTape:
    """
    Records op applications while used as a context manager. A tape is
    single-writer; nesting tapes records only onto the innermost one.
    """

    def __init__(self) -> None:
        self.entries: List[TapeEntry] = []
        self._tensors: Dict[int, Tensor] = {}
        self._produced: Dict[int, int] = {}

    def __enter__(self) -> "GradTape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, exc_type, exc_value, exc_tb) -> None:
        popped = _TAPE_STACK.pop()
        assert popped is self

    def __len__(self) -> int:
        return len(self.entries)

    def __iter__(self) -> Iterator[TapeEntry]:
        return iter(self.entries)

    def watched(self, tensor: Tensor) -> bool:
        """True if `tensor` was an input or output of a recorded op"""
        return id(tensor) in self._tensors

    def record(self, entry: TapeEntry) -> None:
        """Append an entry; called by the ops"""
        self.entries.append(entry)
        for tensor in entry.inputs:
            self._tensors[id(tensor)] = tensor
        self._tensors[id(entry.output)] = entry.output
        self._produced[id(entry.output)] = len(self.entries) - 1

    def _needs_grad(self, tensor: Tensor) -> bool:
        return tensor.requires_grad or id(tensor) in self._produced

    def backward(
        self,
        loss_grad: Union[np.ndarray, float, Tensor] = 1.0,
        *,
        target: Optional[Tensor] = None,
    ) -> Gradients:
        """
        Propagate `loss_grad`, the gradient of the loss with respect to
        `target` (the last recorded output by default), back through the tape.
        """
        if not self.entries:
            raise GradientLookupError("tape is empty")
        if target is None:
            target = self.entries[-1].output
        if id(target) not in self._produced:
            raise GradientLookupError(f"{target!r} was not produced on the tape")

        seed = loss_grad.data if isinstance(loss_grad, Tensor) else loss_grad
        seed = np.broadcast_to(np.asarray(seed, dtype=target.data.dtype), target.shape)
        grads: Dict[int, np.ndarray] = {id(target): np.array(seed)}

        stop = self._produced[id(target)]
        for entry in reversed(self.entries[: stop + 1]):
            grad_out = grads.get(id(entry.output))
            if grad_out is None:
                continue
            needs = tuple(self._needs_grad(x) for x in entry.inputs)
            if not any(needs):
                continue
            input_grads = entry.backward(grad_out, needs)
            for tensor, need, grad in zip(entry.inputs, needs, input_grads):
                if not need or grad is None:
                    continue
                if grad.shape != tensor.shape:
                    raise DimensionError(
                        f"{entry.op} produced gradient of shape {grad.shape} "
                        f"for input of shape {tensor.shape}"
                    )
                prev = grads.get(id(tensor))
                grads[id(tensor)] = grad if prev is None else prev + grad

        return Gradients(self, grads)

    def replay(self) -> List[np.ndarray]:
        """Recompute every recorded output from the recorded inputs"""
        return [entry.forward() for entry in self.entries]


def active_tape() -> Optional[GradTape]:
    """The innermost active tape, if any"""
    return _TAPE_STACK[-1] if _TAPE_STACK else None


def backward(
    tape: GradTape,
    loss_grad: Union[np.ndarray, float, Tensor] = 1.0,
    *,
    target: Optional[Tensor] = None,
) -> Gradients:
    """Functional spelling of `GradTape.backward`"""
    return tape.backward(loss_grad, target=target)


def apply_op(
    op: str,
    inputs: Sequence[Tensor],
    data: np.ndarray,
    forward: Callable[[], np.ndarray],
    backward_fn: BackwardFn,
    *,
    rank4: bool = False,
) -> Tensor:
    """
    Wrap the already computed `data` and, if a tape is active, record the
    application. `forward` recomputes `data` from the inputs for replay. The
    backward closure receives the output gradient and a per-input mask of which
    gradients are needed, and returns one gradient (or None) per input.
    """
    output: Tensor
    if rank4:
        output = Tensor4(data, name=op, requires_grad=False, dtype=data.dtype)
    else:
        output = Tensor(data, name=op, requires_grad=False, dtype=data.dtype)
    tape = active_tape()
    if tape is not None:
        tape.record(
            TapeEntry(
                op=op,
                inputs=tuple(inputs),
                output=output,
                forward=forward,
                backward=backward_fn,
            )
        )
    return output
