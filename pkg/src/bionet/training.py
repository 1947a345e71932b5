"""Two-stage training: thickness regressor first, then the segmentation cascade."""
from __future__ import annotations

import ast
import csv
import json
import math
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from scipy import ndimage

from . import losses
from .metrics import MetricsReport, evaluate_dataset, thickness_of
from .networks import (
    NetworkConfig,
    build_bio_net,
    build_unet,
    cascade_forward,
    freeze,
    frozen_digest,
    is_frozen,
    parameter_digest,
    trainable_parameters,
)
from .types import BScan, ChoroidMask, LayerLabelMap, Sample

ABLATION_MODES = ("unet", "gms", "unet+gms", "unet+bio", "bionet")

# Same x0.1 step shape as the full schedule, with the steps placed inside the desk epoch budget.
DESK_PRESETS = {
    "bio": {"base_width": 16, "epochs": 40, "lr_decay_epochs": (20, 30, 35)},
    "cascade": {"base_width": 16, "epochs": 20, "lr_decay_epochs": (10, 15, 18)},
}


@dataclass
class TrainConfig:
    epochs: int = 40
    batch_size: int = 4
    base_lr: float = 0.01
    lr_decay_epochs: tuple = (40, 80, 160, 240)
    lr_decay_factor: float = 0.1
    # "epoch" counts decay points in epochs, "step" in optimizer steps.
    lr_schedule_unit: str = "epoch"
    adam_betas: tuple = (0.9, 0.999)
    adam_eps: float = 1e-8
    seed: int = 0
    flip_prob: float = 0.5
    max_rotation_deg: float = 10.0
    ablation_mode: str = "bionet"
    base_width: int = 64
    depth: int = 4
    bio_head_width: int = 64
    w_multilayers: float = 1.0
    w_choroid: float = 1.0
    w_bio: float = 0.01
    ce_variant: str = "categorical"
    # thickness-regularizer target: "gt" = reference thickness, "bio_of_gt" = B applied to the reference mask.
    bio_target: str = "gt"
    # "joint" trains both segmenters on the summed loss; "sequential" fits the
    # global module first, then the local module on top of it.
    stage2_schedule: str = "joint"
    bio_blur_prob: float = 0.5
    bio_blur_sigma: float = 1.0
    deterministic: bool = True

    def __post_init__(self):
        self.lr_decay_epochs = tuple(int(e) for e in self.lr_decay_epochs)
        self.adam_betas = tuple(float(b) for b in self.adam_betas)
        if self.base_lr <= 0:
            raise ValueError("base_lr must be positive")
        if any(b <= a for a, b in zip(self.lr_decay_epochs, self.lr_decay_epochs[1:])):
            raise ValueError("lr_decay_epochs must be strictly increasing")
        if self.ablation_mode not in ABLATION_MODES:
            raise ValueError(f"ablation_mode must be one of {ABLATION_MODES}, got {self.ablation_mode!r}")
        if self.lr_schedule_unit not in ("epoch", "step"):
            raise ValueError("lr_schedule_unit must be 'epoch' or 'step'")
        if self.bio_target not in ("gt", "bio_of_gt"):
            raise ValueError("bio_target must be 'gt' or 'bio_of_gt'")
        if self.stage2_schedule not in ("joint", "sequential"):
            raise ValueError("stage2_schedule must be 'joint' or 'sequential'")
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")

    @classmethod
    def desk(cls, stage: str = "cascade", **overrides) -> "TrainConfig":
        """128x128 phantom settings: narrow networks, decay points compressed into the short run."""
        preset = DESK_PRESETS[stage]
        return cls(**{**preset, **overrides})

    @property
    def weights(self) -> losses.LossWeights:
        return losses.LossWeights(self.w_multilayers, self.w_choroid, self.w_bio)

    @property
    def uses_global(self) -> bool:
        return self.ablation_mode in ("gms", "unet+gms", "bionet")

    @property
    def uses_local(self) -> bool:
        return self.ablation_mode != "gms"

    @property
    def uses_bio(self) -> bool:
        return self.ablation_mode in ("unet+bio", "bionet")

    def to_text(self) -> str:
        return "".join(f"{f.name} = {getattr(self, f.name)!r}\n" for f in fields(self))

    @classmethod
    def from_text(cls, text: str) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        values = {}
        for lineno, line in enumerate(text.splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"config line {lineno}: expected key = value")
            key, raw = (s.strip() for s in line.split("=", 1))
            if key not in known:
                raise ValueError(f"config line {lineno}: unknown key {key!r}")
            try:
                values[key] = ast.literal_eval(raw)
            except (ValueError, SyntaxError):
                values[key] = raw
        return cls(**values)

    @classmethod
    def load(cls, path) -> "TrainConfig":
        return cls.from_text(Path(path).read_text())

    def save(self, path) -> None:
        Path(path).write_text(self.to_text())


def lr_at(epoch: int, config: TrainConfig) -> float:
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    n = sum(1 for e in config.lr_decay_epochs if e <= epoch)
    return config.base_lr * config.lr_decay_factor**n


# --- logging ---------------------------------------------------------------


@dataclass
class EpochRecord:
    stage: str
    epoch: int
    lr: float
    losses: dict
    val: dict | None = None
    wall_time: float = 0.0

    def comparable(self) -> dict:
        d = asdict(self)
        d.pop("wall_time")
        return d


@dataclass
class TrainLog:
    records: list[EpochRecord] = field(default_factory=list)
    summary: dict = field(default_factory=dict)

    def append(self, rec: EpochRecord) -> None:
        self.records.append(rec)

    def comparable(self) -> list[dict]:
        """Records without wall-clock time, for run-to-run comparison."""
        return [r.comparable() for r in self.records]

    def save(self, out_dir, name: str = "trainlog") -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        loss_keys = sorted({k for r in self.records for k in r.losses})
        val_keys = sorted({k for r in self.records if r.val for k in r.val})
        with open(out / f"{name}.tsv", "w", newline="") as fh:
            w = csv.writer(fh, delimiter="\t")
            w.writerow(["stage", "epoch", "lr", *loss_keys, *(f"val_{k}" for k in val_keys), "wall_time"])
            for r in self.records:
                w.writerow(
                    [r.stage, r.epoch, repr(r.lr)]
                    + [repr(r.losses.get(k, "")) for k in loss_keys]
                    + [repr((r.val or {}).get(k, "")) for k in val_keys]
                    + [f"{r.wall_time:.3f}"]
                )
        (out / f"{name}.json").write_text(
            json.dumps({"summary": self.summary, "records": [asdict(r) for r in self.records]}, indent=2) + "\n"
        )

    @classmethod
    def load(cls, path) -> "TrainLog":
        raw = json.loads(Path(path).read_text())
        return cls([EpochRecord(**r) for r in raw["records"]], raw.get("summary", {}))


# --- augmentation ----------------------------------------------------------


def apply_augmentation(sample: Sample, flip: bool, angle: float) -> Sample:
    """Flip and/or rotate image, layer map and mask together; recompute thickness."""
    img = sample.image.pixels
    lab = sample.layers.labels
    if flip:
        img = img[:, ::-1]
        lab = lab[:, ::-1]
    if angle != 0.0:
        img = ndimage.rotate(img, angle, reshape=False, order=1, mode="nearest")
        lab = ndimage.rotate(lab, angle, reshape=False, order=0, mode="nearest")
    img = np.clip(img, 0.0, 1.0)
    mask = (lab == sample.choroid_class).astype(np.uint8)
    return Sample(
        image=BScan(img),
        layers=LayerLabelMap(lab, sample.layers.num_classes),
        choroid=ChoroidMask(mask),
        thickness=thickness_of(mask),
        id=sample.id,
        choroid_class=sample.choroid_class,
    )


def draw_augmentation(rng: np.random.Generator, config: TrainConfig) -> tuple[bool, float]:
    flip = bool(rng.random() < config.flip_prob)
    angle = float(rng.uniform(-config.max_rotation_deg, config.max_rotation_deg)) if config.max_rotation_deg else 0.0
    return flip, angle


def augment(sample: Sample, rng: np.random.Generator, config: TrainConfig | None = None) -> Sample:
    config = config or TrainConfig()
    flip, angle = draw_augmentation(rng, config)
    return apply_augmentation(sample, flip, angle)


# --- batching --------------------------------------------------------------


def _rng(*key: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(list(key))))


def _stack(samples: Sequence[Sample]):
    img = torch.from_numpy(np.stack([s.image.pixels for s in samples])).float().unsqueeze(1)
    lab = torch.from_numpy(np.stack([s.layers.labels for s in samples])).long()
    mask = torch.from_numpy(np.stack([s.choroid.mask for s in samples])).float()
    thick = torch.tensor([s.thickness.value for s in samples], dtype=torch.float32)
    return img, lab, mask, thick


def pad_to_multiple(x: torch.Tensor, factor: int) -> tuple[torch.Tensor, tuple[int, int]]:
    h, w = x.shape[-2:]
    ph, pw = (-h) % factor, (-w) % factor
    if ph or pw:
        x = torch.nn.functional.pad(x, (0, pw, 0, ph), mode="replicate")
    return x, (h, w)


def _epoch_batches(n: int, batch_size: int, rng: np.random.Generator) -> list[np.ndarray]:
    order = rng.permutation(n)
    return [order[i : i + batch_size] for i in range(0, n, batch_size)]


def _set_lr(opt: torch.optim.Optimizer, lr: float) -> None:
    for g in opt.param_groups:
        g["lr"] = lr


def _make_optimizer(params, config: TrainConfig) -> torch.optim.Adam:
    return torch.optim.Adam(params, lr=config.base_lr, betas=config.adam_betas, eps=config.adam_eps)


def _check_finite(value: float, stage: str, epoch: int, what: str) -> None:
    if not math.isfinite(value):
        raise FloatingPointError(f"{stage}: non-finite {what} loss at epoch {epoch}; training diverged")


def set_determinism(config: TrainConfig) -> None:
    torch.manual_seed(config.seed)
    if config.deterministic:
        torch.use_deterministic_algorithms(True)


# --- stage 1 ---------------------------------------------------------------


@dataclass
class BioResult:
    net: torch.nn.Module
    log: TrainLog
    digest: str
    val_mae: float


def _bio_inputs(samples: Sequence[Sample], rng: np.random.Generator, config: TrainConfig):
    masks = []
    for s in samples:
        m = s.choroid.mask.astype(np.float64)
        if rng.random() < config.bio_blur_prob:
            m = np.clip(ndimage.gaussian_filter(m, config.bio_blur_sigma), 0.0, 1.0)
        masks.append(m)
    return torch.from_numpy(np.stack(masks)).float().unsqueeze(1)


@torch.no_grad()
def bio_mae(net: torch.nn.Module, samples: Sequence[Sample], batch_size: int = 16) -> float:
    was_training = net.training
    net.eval()
    errs = []
    for i in range(0, len(samples), batch_size):
        chunk = samples[i : i + batch_size]
        x = torch.from_numpy(np.stack([s.choroid.mask for s in chunk])).float().unsqueeze(1)
        t = torch.tensor([s.thickness.value for s in chunk])
        errs.append((net(x).double() - t.double()).abs())
    net.train(was_training)
    return float(torch.cat(errs).mean())


def train_bio_stage(train: Sequence[Sample], config: TrainConfig, val: Sequence[Sample] | None = None) -> BioResult:
    """Fit the thickness regressor on reference masks, then freeze it."""
    train = list(train)
    if not train:
        raise ValueError("training set is empty")
    val = list(val) if val else []
    set_determinism(config)
    net = build_bio_net(NetworkConfig(1, 1, config.base_width, config.depth, config.bio_head_width))
    opt = _make_optimizer(trainable_parameters(net), config)
    log = TrainLog()
    step = 0
    for epoch in range(config.epochs):
        t0 = time.perf_counter()
        rng = _rng(config.seed, 1, epoch)
        net.train()
        total, count = 0.0, 0
        for idx in _epoch_batches(len(train), config.batch_size, rng):
            if config.lr_schedule_unit == "epoch":
                _set_lr(opt, lr_at(epoch, config))
            else:
                _set_lr(opt, lr_at(step, config))
            batch = [augment(train[i], rng, config) for i in idx]
            x = _bio_inputs(batch, rng, config)
            target = torch.tensor([s.thickness.value for s in batch])
            loss = losses.bio_mae_loss(net(x), target)
            opt.zero_grad()
            loss.backward()
            opt.step()
            _check_finite(loss.item(), "bio", epoch, "MAE")
            total += loss.item() * len(idx)
            count += len(idx)
            step += 1
        rec = EpochRecord("bio", epoch, opt.param_groups[0]["lr"], {"bio_mae": total / count})
        if val:
            rec.val = {"mae": bio_mae(net, val)}
        rec.wall_time = time.perf_counter() - t0
        log.append(rec)
    net.eval()
    freeze(net)
    val_mae = bio_mae(net, val) if val else bio_mae(net, train)
    log.summary = {"val_mae": val_mae, "digest": frozen_digest(net), "epochs": config.epochs}
    return BioResult(net, log, frozen_digest(net), val_mae)


# --- stage 2 ---------------------------------------------------------------


@dataclass
class ModelBundle:
    """Trained segmenters for one ablation mode; ``predict`` yields choroid probabilities."""

    mode: str
    u_g: torch.nn.Module | None
    u_c: torch.nn.Module | None
    choroid_class: int = 9
    depth: int = 4

    def _choroid_prob(self, x: torch.Tensor) -> torch.Tensor:
        if self.mode == "gms":
            return self.u_g(x)[:, self.choroid_class]
        if self.mode in ("unet", "unet+bio"):
            return self.u_c(x)[:, 0]
        return cascade_forward(x, self.u_g, self.u_c).choroid_prob[:, 0]

    @torch.no_grad()
    def predict(self, images, batch_size: int = 8) -> np.ndarray:
        """N x H x W choroid probabilities for N x H x W images in [0, 1]."""
        for net in (self.u_g, self.u_c):
            if net is not None:
                net.eval()
        x = torch.as_tensor(np.asarray(images), dtype=torch.float32)
        if x.dim() == 2:
            x = x[None]
        x = x.unsqueeze(1)
        out = []
        for i in range(0, x.shape[0], batch_size):
            xb, (h, w) = pad_to_multiple(x[i : i + batch_size], 2**self.depth)
            out.append(self._choroid_prob(xb)[:, :h, :w])
        return torch.cat(out).numpy().astype(np.float64)

    def predict_masks(self, samples: Sequence[Sample]) -> list[ChoroidMask]:
        probs = self.predict(np.stack([s.image.pixels for s in samples]))
        return [ChoroidMask.from_probability(p) for p in probs]


def build_mode_networks(config: TrainConfig, num_classes: int = 12):
    torch.manual_seed(config.seed)
    u_g = u_c = None
    if config.uses_global:
        u_g = build_unet(NetworkConfig(1, num_classes, config.base_width, config.depth, head="softmax"))
    if config.uses_local:
        in_c = 1 + num_classes if config.ablation_mode in ("unet+gms", "bionet") else 1
        u_c = build_unet(NetworkConfig(in_c, 1, config.base_width, config.depth, head="sigmoid"))
    return u_g, u_c


def _stage2_losses(bundle: ModelBundle, img, lab, mask, thick, frozen_bio, config: TrainConfig, phase: str):
    mode = bundle.mode
    parts = {}
    zero = img.new_zeros(())
    g = c = None
    if mode == "gms" or phase == "global":
        g = bundle.u_g(img)
    elif mode in ("unet", "unet+bio"):
        c = bundle.u_c(img)
    elif phase == "local":
        with torch.no_grad():
            g = bundle.u_g(img)
        c = bundle.u_c(torch.cat([img, g], dim=1))
    else:
        out = cascade_forward(img, bundle.u_g, bundle.u_c)
        g, c = out.global_probs, out.choroid_prob
    l_ml = losses.multilayer_ce_loss(g, lab, config.ce_variant) if g is not None and phase != "local" else zero
    l_ch = losses.choroid_bce_loss(c, mask) if c is not None else zero
    l_bio = zero
    if c is not None and config.uses_bio:
        if config.bio_target == "gt":
            target = thick
        else:
            with torch.no_grad():
                target = frozen_bio(mask.unsqueeze(1))
        l_bio = losses.bio_regularizer_loss(c, target, frozen_bio)
    weights = config.weights
    if not config.uses_bio:
        weights = replace(weights, w_bio=0.0)
    total = losses.total_loss(l_ml, l_ch, l_bio, weights)
    parts = {"multilayers": l_ml.item(), "choroid": l_ch.item(), "bio": l_bio.item(), "total": total.item()}
    return total, parts


@dataclass
class CascadeResult:
    model: ModelBundle
    log: TrainLog
    bio_digest_before: str | None = None
    bio_digest_after: str | None = None


def evaluate_model(model, samples: Sequence[Sample]) -> MetricsReport:
    """Binarize the model's choroid map at 0.5 and score it against each sample's mask."""
    samples = list(samples)
    if hasattr(model, "predict_masks"):
        preds = model.predict_masks(samples)
    else:
        probs = model(np.stack([s.image.pixels for s in samples]))
        preds = [ChoroidMask.from_probability(p) for p in probs]
    return evaluate_dataset(preds, [s.choroid for s in samples])


def train_cascade_stage(
    train: Sequence[Sample],
    frozen_bio: torch.nn.Module | None,
    config: TrainConfig,
    val: Sequence[Sample] | None = None,
) -> CascadeResult:
    train = list(train)
    if not train:
        raise ValueError("training set is empty")
    val = list(val) if val else []
    if config.uses_bio:
        if frozen_bio is None:
            raise ValueError(f"mode {config.ablation_mode!r} needs a frozen biomarker network")
        if not is_frozen(frozen_bio):
            raise ValueError("biomarker network is not frozen")
    set_determinism(config)
    num_classes = train[0].layers.num_classes
    u_g, u_c = build_mode_networks(config, num_classes)
    bundle = ModelBundle(config.ablation_mode, u_g, u_c, train[0].choroid_class, config.depth)
    before = parameter_digest(frozen_bio) if frozen_bio is not None else None

    if config.stage2_schedule == "sequential" and config.ablation_mode in ("unet+gms", "bionet"):
        phases = [("global", [u_g]), ("local", [u_c])]
    else:
        phases = [("joint", [n for n in (u_g, u_c) if n is not None])]

    log = TrainLog()
    factor = 2**config.depth
    for phase, nets in phases:
        opt = _make_optimizer(trainable_parameters(*nets), config)
        step = 0
        stage = "cascade" if phase == "joint" else f"cascade-{phase}"
        for epoch in range(config.epochs):
            t0 = time.perf_counter()
            rng = _rng(config.seed, 2, epoch)
            for n in nets:
                n.train()
            if phase == "local":
                u_g.eval()
            sums: dict[str, float] = {}
            count = 0
            for idx in _epoch_batches(len(train), config.batch_size, rng):
                _set_lr(opt, lr_at(epoch if config.lr_schedule_unit == "epoch" else step, config))
                batch = [augment(train[i], rng, config) for i in idx]
                img, lab, mask, thick = _stack(batch)
                if img.shape[-2] % factor or img.shape[-1] % factor:
                    raise ValueError(f"training images must have sides divisible by {factor}")
                loss, parts = _stage2_losses(bundle, img, lab, mask, thick, frozen_bio, config, phase)
                opt.zero_grad()
                loss.backward()
                opt.step()
                _check_finite(parts["total"], stage, epoch, "total")
                for k, v in parts.items():
                    sums[k] = sums.get(k, 0.0) + v * len(idx)
                count += len(idx)
                step += 1
            rec = EpochRecord(stage, epoch, opt.param_groups[0]["lr"], {k: v / count for k, v in sums.items()})
            if val and (phase != "global" or config.ablation_mode == "gms"):
                rec.val = evaluate_model(bundle, val).to_dict()
            rec.wall_time = time.perf_counter() - t0
            log.append(rec)
            if frozen_bio is not None and parameter_digest(frozen_bio) != before:
                raise RuntimeError("biomarker network parameters changed during cascade training")

    after = parameter_digest(frozen_bio) if frozen_bio is not None else None
    if before != after:
        raise RuntimeError("biomarker network parameters changed during cascade training")
    for n in (u_g, u_c):
        if n is not None:
            n.eval()
    log.summary = {"mode": config.ablation_mode, "epochs": config.epochs, "bio_digest": after}
    if val:
        log.summary["val"] = evaluate_model(bundle, val).to_dict()
    return CascadeResult(bundle, log, before, after)
