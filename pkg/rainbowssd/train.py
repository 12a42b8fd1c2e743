import dataclasses
import json
import logging
import math
from typing import IO, Dict, List, Optional, Sequence, Tuple

import numpy as np

from rainbowssd.autograd import GradTape, Gradients
from rainbowssd.boxes import GroundTruth, MatchResult, match_anchors
from rainbowssd.config import TrainOptions
from rainbowssd.data import AnnotationSet, flip_horizontal, resize_nearest
from rainbowssd.exceptions import NumericError, ValidationError
from rainbowssd.heads import LossBreakdown, multibox_loss
from rainbowssd.model import SSDModel
from rainbowssd.tensor import Tensor, Tensor4, default_dtype

LOGGER = logging.getLogger(__name__)


@dataclasses.dataclass(frozen=True)
class StepLog:
    """One line of the training log"""

    step: int
    lr: float
    loc: float
    conf: float
    total: float
    positives: int

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self), sort_keys=True)


class SGD:
    """
    Momentum SGD with L2 weight decay and optional global-norm clipping.
    Velocities are keyed by parameter name so the parameter set may change
    between steps.
    """

    def __init__(
        self,
        momentum: float = 0.9,
        weight_decay: float = 5e-4,
        clip_norm: Optional[float] = None,
    ) -> None:
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.clip_norm = clip_norm
        self.velocity: Dict[str, np.ndarray] = {}

    def step(self, params: Sequence[Tuple[str, Tensor]], grads: Gradients, lr: float) -> float:
        """Apply one update in place; returns the gradient norm before clipping"""
        collected = []
        for name, param in params:
            grad = grads.get(param)
            if grad is not None:
                collected.append((name, param, grad))
        norm = math.sqrt(sum(float(np.sum(g * g)) for _, _, g in collected))
        if not math.isfinite(norm):
            raise NumericError(f"gradient norm is {norm}")
        scale = 1.0
        if self.clip_norm is not None and norm > self.clip_norm:
            scale = self.clip_norm / norm

        live = set()
        for name, param, grad in collected:
            live.add(name)
            update = grad * scale + self.weight_decay * param.data
            vel = self.velocity.get(name)
            vel = update if vel is None else self.momentum * vel + update
            self.velocity[name] = vel
            param.data -= lr * vel
        for name in list(self.velocity):
            if name not in live:
                del self.velocity[name]
        return norm


class BatchSampler:
    """Epoch-wise shuffled indices from a seeded generator"""

    def __init__(self, size: int, batch_size: int, rng: np.random.Generator) -> None:
        self.size = size
        self.batch_size = min(batch_size, size)
        self.rng = rng
        self._queue: List[int] = []

    def next(self) -> List[int]:
        while len(self._queue) < self.batch_size:
            self._queue.extend(int(i) for i in self.rng.permutation(self.size))
        batch, self._queue = self._queue[: self.batch_size], self._queue[self.batch_size :]
        return batch


class Trainer:
    """Owns the optimizer state and data order for one training run"""

    def __init__(
        self,
        model: SSDModel,
        images: np.ndarray,
        ann: AnnotationSet,
        options: Optional[TrainOptions] = None,
        *,
        log: Optional[IO[str]] = None,
    ) -> None:
        self.model = model
        self.options = options or model.config.train
        if tuple(ann.class_names) != tuple(model.config.classes):
            raise ValidationError(
                f"annotation classes {list(ann.class_names)} do not match model classes "
                f"{list(model.config.classes)}"
            )
        if len(images) != len(ann.images):
            raise ValidationError(
                f"{len(images)} images for {len(ann.images)} annotated images"
            )
        self.images = images
        gts = ann.ground_truths()
        self.gts: List[List[GroundTruth]] = [gts[info.image_id] for info in ann.images]
        self.log = log
        self.optimizer = SGD(
            self.options.momentum, self.options.weight_decay, self.options.clip_norm
        )
        rng = np.random.default_rng([self.options.seed, 2])
        self.flip_rng = np.random.default_rng([self.options.seed, 3])
        self.sampler = BatchSampler(len(images), self.options.batch_size, rng)
        self.history: List[StepLog] = []

    def _batch(self, indices: Sequence[int]) -> Tuple[Tensor4, List[List[GroundTruth]]]:
        size = self.model.config.pyramid.input_size
        images = resize_nearest(self.images[list(indices)], size).astype(default_dtype())
        gts = [self.gts[i] for i in indices]
        if self.options.flip:
            mask = self.flip_rng.random(len(indices)) < 0.5
            if np.any(mask):
                flipped, flipped_gts = flip_horizontal(
                    images[mask], [g for g, m in zip(gts, mask) if m]
                )
                images[mask] = flipped
                it = iter(flipped_gts)
                gts = [next(it) if m else g for g, m in zip(gts, mask)]
        return Tensor4(images, requires_grad=False), gts

    def matches(self, gts: Sequence[Sequence[GroundTruth]]) -> List[MatchResult]:
        return [
            match_anchors(self.model.anchors, image_gts, self.options.match_iou)
            for image_gts in gts
        ]

    def train_step(self, step: int) -> StepLog:
        """One forward/backward/update; the logged loss is before the update"""
        if self.options.unshare_at_step is not None and step == self.options.unshare_at_step:
            if self.model.heads.shared:
                self.model.unshare_heads()

        images, gts = self._batch(self.sampler.next())
        matches = self.matches(gts)
        with GradTape() as tape:
            out = self.model(images, training=True)
            loss: LossBreakdown = multibox_loss(
                out.logits, out.offsets, matches, self.options.neg_pos_ratio
            )
        if not math.isfinite(loss.total):
            raise NumericError(
                f"non-finite loss at step {step}: loc={loss.loc} conf={loss.conf} "
                f"positives={loss.positives}"
            )
        assert loss.tensor is not None
        grads = tape.backward(target=loss.tensor)
        lr = self.options.lr_at(step)
        self.optimizer.step(list(self.model.named_parameters()), grads, lr)

        record = StepLog(step, lr, loss.loc, loss.conf, loss.total, loss.positives)
        self.history.append(record)
        if self.log is not None:
            self.log.write(record.to_json() + "\n")
        if self.options.log_every and step % self.options.log_every == 0:
            LOGGER.info(
                "step %d lr %.2e loss %.4f (loc %.4f conf %.4f, %d positives)",
                step,
                lr,
                loss.total,
                loss.loc,
                loss.conf,
                loss.positives,
            )
        return record

    def run(self, steps: Optional[int] = None) -> List[StepLog]:
        total = self.options.steps if steps is None else steps
        for step in range(total):
            self.train_step(step)
        return self.history


def train(
    model: SSDModel,
    images: np.ndarray,
    ann: AnnotationSet,
    *,
    log: Optional[IO[str]] = None,
    steps: Optional[int] = None,
) -> List[StepLog]:
    """Train `model` in place with its configured options"""
    return Trainer(model, images, ann, log=log).run(steps)


def read_log(fobj: IO[str]) -> List[StepLog]:
    """Parse a JSON-lines training log"""
    return [StepLog(**json.loads(line)) for line in fobj if line.strip()]
