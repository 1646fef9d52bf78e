"""Training, checkpointing and inference for every synthesis method."""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np
import torch

from . import losses as L
from .dataman import PairedSample, augment as augment_sample
from .geometry import Homography, RegionMaskSet, composite_regions, default_region_masks, warp_image
from .nets import DiscriminatorSpec, GeneratorSpec, build, spec_from_dict, spec_to_dict

log = logging.getLogger(__name__)

METHODS = ("x-pix2pix", "x-so", "x-fork", "x-seq", "h-pix2pix", "h-so", "h-fork", "h-seq", "h-regions")
REGION_TASKS = ("inpaint", "car", "realism")


class ConfigError(ValueError):
    pass


class TrainingDiverged(RuntimeError):
    pass


class CheckpointError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    method: str = "x-pix2pix"
    direction: str = "a2g"
    epochs: int = 20
    steps: int | None = None
    batch_size: int = 1
    learning_rate: float = 2e-4
    lr_decay: float = 0.0  # fraction of the run over which the rate falls linearly to zero
    adam_beta1: float = 0.5
    adam_beta2: float = 0.999
    smooth: float = 0.9
    lambda1: float = 1.0
    lambda2: float = 100.0
    seed: int = 0
    resolution: int = 256
    base_width: int = 64
    disc_depth: int = 3
    block_trim: int = 0
    dropout: float = 0.5
    skip: bool = False
    augment: bool = False
    jitter: int = 30
    flip_prob: float = 0.5
    so_half_adv: bool = False
    threads: int = 1
    # H-Regions subtasks
    inpaint_epochs: int = 20
    car_epochs: int = 1
    realism_epochs: int = 5
    inpaint_steps: int | None = None
    car_steps: int | None = None
    realism_steps: int | None = None
    car_base_width: int | None = None
    realism_skip: bool = True
    realism_residual: bool = True
    bn_recalibrate: bool = True
    realism_lambda1: float = 5.0
    realism_lambda2: float = 2.0
    band_width: int | None = None

    def __post_init__(self):
        if self.method not in METHODS:
            raise ConfigError(f"unknown method {self.method!r}; expected one of {METHODS}")
        if self.direction not in ("a2g", "g2a"):
            raise ConfigError(f"direction must be a2g or g2a, got {self.direction!r}")
        if self.method.startswith("h-") and self.direction != "a2g":
            raise ConfigError("homography methods are defined for a2g only")
        if self.batch_size < 1 or self.epochs < 0 or (self.steps is not None and self.steps < 0):
            raise ConfigError("batch_size must be >= 1 and epochs/steps >= 0")
        if not 0 <= self.lr_decay <= 1:
            raise ConfigError("lr_decay must lie in [0, 1]")
        if not 0 < self.smooth <= 1:
            raise ConfigError("smooth must lie in (0, 1]")
        L.LossWeights(self.lambda1, self.lambda2)

    @property
    def family(self) -> str:
        return self.method.split("-", 1)[1]

    @property
    def uses_homography(self) -> bool:
        return self.method.startswith("h-")

    @property
    def weights(self) -> L.LossWeights:
        l1 = self.lambda1 * (0.5 if self.family == "so" and self.so_half_adv else 1.0)
        return L.LossWeights(l1, self.lambda2)

    def to_dict(self) -> dict:
        return asdict(self)

    def fingerprint(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    def with_overrides(self, overrides: dict) -> "TrainConfig":
        merged = {**self.to_dict(), **{k: parse_value(self, k, v) for k, v in overrides.items()}}
        return TrainConfig.from_dict(merged)

    @classmethod
    def from_text(cls, text: str, base: "TrainConfig | None" = None) -> "TrainConfig":
        """Parse ``key=value`` lines (``#`` comments allowed) or a JSON object."""
        base = base or cls()
        stripped = text.strip()
        if stripped.startswith("{"):
            return base.with_overrides(json.loads(stripped))
        pairs = {}
        for line in text.splitlines():
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"expected key=value, got {line!r}")
            k, v = line.split("=", 1)
            pairs[k.strip()] = v.strip()
        return base.with_overrides(pairs)


def parse_value(cfg: TrainConfig, key: str, value):
    known = {f.name: f for f in fields(TrainConfig)}
    if key not in known:
        raise ConfigError(f"unknown config key: {key!r}")
    if not isinstance(value, str):
        return value
    if value.lower() in ("none", "null"):
        return None
    current = getattr(cfg, key)
    hint = str(known[key].type)
    if isinstance(current, bool) or hint.startswith("bool"):
        if value.lower() in ("1", "true", "yes", "on"):
            return True
        if value.lower() in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"{key}: expected a boolean, got {value!r}")
    try:
        if hint.startswith("int"):
            return int(value)
        if hint.startswith("float"):
            return float(value)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {value!r}") from None
    return value


def _tensors(obj):
    if isinstance(obj, torch.Tensor):
        yield obj
    elif isinstance(obj, dict):
        for v in obj.values():
            yield from _tensors(v)
    elif isinstance(obj, (list, tuple)):
        for v in obj:
            yield from _tensors(v)


PRESETS = {
    "overfit8": dict(resolution=64, steps=200, batch_size=8, base_width=32, learning_rate=1e-3, lr_decay=0.5,
                     inpaint_steps=200, car_steps=100, realism_steps=200),
    "desk64": dict(resolution=64, steps=1000, batch_size=8, base_width=32, learning_rate=1e-3, lr_decay=0.5,
                   skip=True, inpaint_steps=1000, car_steps=300, realism_steps=600),
    "desk256": dict(resolution=256, epochs=5, batch_size=4, base_width=32,
                    inpaint_epochs=5, car_epochs=1, realism_epochs=2),
}


def preset(name: str, **overrides) -> TrainConfig:
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; expected one of {sorted(PRESETS)}")
    return TrainConfig(**{**PRESETS[name], **overrides})


# ------------------------------------------------------------------ networks


def network_specs(cfg: TrainConfig, family: str | None = None) -> dict:
    """Generator/discriminator specs of every network ``family`` trains."""
    family = family or cfg.family
    g = dict(resolution=cfg.resolution, base_width=cfg.base_width, block_trim=cfg.block_trim,
             dropout_rate=cfg.dropout, skip=cfg.skip)
    d = dict(resolution=cfg.resolution, depth=cfg.disc_depth, base_width=cfg.base_width)
    if family == "realism":
        g["skip"] = cfg.realism_skip
        g["residual"] = cfg.realism_residual
    if family in ("pix2pix", "inpaint", "realism"):
        return {"G": GeneratorSpec(3, **g), "D": DiscriminatorSpec(6, **d)}
    if family == "car":
        g["base_width"] = cfg.car_base_width or max(8, cfg.base_width // 2)
        return {"G": GeneratorSpec(3, **g), "D": DiscriminatorSpec(6, **d)}
    if family == "so":
        return {"G": GeneratorSpec(3, out_channels_per_head=6, **g), "D": DiscriminatorSpec(9, **d)}
    if family == "fork":
        return {"G": GeneratorSpec(3, out_heads=2, **g), "D": DiscriminatorSpec(6, **d)}
    if family == "seq":
        return {"G1": GeneratorSpec(3, **g), "D1": DiscriminatorSpec(6, **d),
                "G2": GeneratorSpec(3, **g), "D2": DiscriminatorSpec(6, **d)}
    raise ConfigError(f"unknown family {family!r}")


def generator_names(nets) -> list[str]:
    return [k for k in nets if k.startswith("G")]


def param_hash(net: torch.nn.Module) -> str:
    h = hashlib.sha256()
    for p in net.parameters():
        h.update(p.detach().cpu().numpy().tobytes())
    return h.hexdigest()


# ------------------------------------------------------------------ data


def _chw(arrs) -> torch.Tensor:
    return torch.from_numpy(np.ascontiguousarray(np.stack(arrs).transpose(0, 3, 1, 2), dtype=np.float32))


def conditioning_and_targets(samples: list[PairedSample], cfg: TrainConfig) -> dict:
    """Tensors for a batch: ``cond``, ``img`` and ``seg`` (plus ``warped`` when present).

    a2g conditions on the aerial view (its homography warp for h-* methods)
    and targets the ground view; g2a swaps the two roles.
    """
    if cfg.direction == "a2g":
        if cfg.uses_homography:
            if any(s.warped_aerial is None for s in samples):
                raise ConfigError(f"{cfg.method} needs homography-warped aerial images")
            cond = [s.warped_aerial for s in samples]
        else:
            cond = [s.aerial for s in samples]
        img = [s.ground for s in samples]
        seg = [s.ground_seg for s in samples]
    else:
        cond = [s.ground for s in samples]
        img = [s.aerial for s in samples]
        if cfg.family in ("so", "fork", "seq") and any(s.aerial_seg is None for s in samples):
            raise ConfigError(f"{cfg.method} in g2a needs aerial segmentation maps")
        seg = [s.aerial_seg if s.aerial_seg is not None else s.aerial for s in samples]
    batch = {"cond": _chw(cond), "img": _chw(img), "seg": _chw(seg)}
    if all(s.warped_aerial is not None for s in samples):
        batch["warped"] = _chw([s.warped_aerial for s in samples])
    return batch


def epoch_order(seed: int, epoch: int, n: int) -> np.ndarray:
    return np.random.default_rng([seed, epoch]).permutation(n)


def batch_indices(seed: int, n: int, batch_size: int, step: int) -> np.ndarray:
    per_epoch = math.ceil(n / batch_size)
    epoch, k = divmod(step, per_epoch)
    order = epoch_order(seed, epoch, n)
    return order[k * batch_size:(k + 1) * batch_size]


def total_steps(cfg: TrainConfig, n: int, epochs: int | None = None, steps: int | None = None) -> int:
    if steps is not None:
        return steps
    return (cfg.epochs if epochs is None else epochs) * math.ceil(n / cfg.batch_size)


# ------------------------------------------------------------------ method logic


def generate(family: str, nets: dict, batch: dict) -> dict:
    cond = batch["cond"]
    if family in ("pix2pix", "inpaint", "realism"):
        return {"img": nets["G"](cond)}
    if family == "car":
        return {"img": nets["G"](cond) * batch["m2"]}
    if family == "so":
        out = nets["G"](cond)
        return {"out6": out, "img": out[:, :3], "seg": out[:, 3:]}
    if family == "fork":
        img, seg = nets["G"](cond)
        return {"img": img, "seg": seg}
    if family == "seq":
        img = nets["G1"](cond)
        return {"img": img, "seg": nets["G2"](img)}
    raise ConfigError(family)


def d_loss(family: str, nets: dict, batch: dict, fakes: dict, smooth: float):
    cond = batch["cond"]
    if family == "so":
        real = torch.cat([batch["img"], batch["seg"]], 1)
        return L.adv_loss_d(nets["D"](cond, real), nets["D"](cond, fakes["out6"].detach()), smooth)
    if family == "seq":
        img = fakes["img"].detach()
        l1 = L.adv_loss_d(nets["D1"](cond, batch["img"]), nets["D1"](cond, img), smooth)
        l2 = L.adv_loss_d(nets["D2"](batch["img"], batch["seg"]), nets["D2"](img, fakes["seg"].detach()), smooth)
        return l1 + l2
    real = batch["img"]
    return L.adv_loss_d(nets["D"](cond, real), nets["D"](cond, fakes["img"].detach()), smooth)


def g_loss(family: str, nets: dict, batch: dict, fakes: dict, cfg: TrainConfig) -> L.LossReport:
    cond, w = batch["cond"], cfg.weights
    if family == "pix2pix":
        return L.network_objective(nets["D"](cond, fakes["img"]), fakes["img"], batch["img"], w)
    if family == "so":
        return L.stacked_objective(nets["D"](cond, fakes["out6"]), fakes["out6"], batch["img"], batch["seg"], w)
    if family == "fork":
        return L.fork_objective(nets["D"](cond, fakes["img"]), fakes["img"], batch["img"],
                                fakes["seg"], batch["seg"], w)
    if family == "seq":
        s1 = L.network_objective(nets["D1"](cond, fakes["img"]), fakes["img"], batch["img"], w)
        s2 = L.network_objective(nets["D2"](fakes["img"], fakes["seg"]), fakes["seg"], batch["seg"], w)
        return L.seq_objective(s1, s2)
    if family == "inpaint":
        return L.network_objective(nets["D"](cond, fakes["img"]), fakes["img"], batch["img"], w, mask=batch["m1"])
    if family == "car":
        return L.network_objective(nets["D"](cond, fakes["img"]), fakes["img"], batch["img"], w, mask=batch["m2"])
    if family == "realism":
        rw = L.LossWeights(cfg.realism_lambda1, cfg.realism_lambda2)
        return L.realism_objective(fakes["img"], cond, nets["D"](cond, fakes["img"]), batch["band"], rw)
    raise ConfigError(family)


# ------------------------------------------------------------------ checkpoints


@dataclass
class Checkpoint:
    config: dict
    fingerprint: str
    family: str
    step: int
    epoch: int
    specs: dict
    nets: dict
    optim: dict = field(default_factory=dict)
    rng: dict = field(default_factory=dict)
    extra: dict = field(default_factory=dict)

    @property
    def cfg(self) -> TrainConfig:
        return TrainConfig.from_dict(self.config)

    def verify(self):
        if TrainConfig.from_dict(self.config).fingerprint() != self.fingerprint:
            raise CheckpointError("config fingerprint mismatch")
        for name, sd in self.specs.items():
            if spec_from_dict(sd).fingerprint() != self.extra.get("spec_fingerprints", {}).get(name):
                raise CheckpointError(f"network {name}: spec fingerprint mismatch")

    def build_nets(self) -> dict:
        self.verify()
        nets = {}
        for name, sd in self.specs.items():
            net = build(spec_from_dict(sd))
            net.load_state_dict(self.nets[name])
            net.eval()
            nets[name] = net
        return nets

    def save(self, path):
        torch.save(asdict(self), Path(path))

    @classmethod
    def load(cls, path) -> "Checkpoint":
        blob = torch.load(Path(path), map_location="cpu", weights_only=False)
        ck = cls(**blob)
        ck.verify()
        return ck


def make_checkpoint(cfg, family, step, epoch, nets, opts, extra=None) -> Checkpoint:
    specs = {k: spec_to_dict(v.spec) for k, v in nets.items()}
    ex = dict(extra or {})
    ex["spec_fingerprints"] = {k: v.spec.fingerprint() for k, v in nets.items()}
    return Checkpoint(
        config=cfg.to_dict(), fingerprint=cfg.fingerprint(), family=family, step=step, epoch=epoch,
        specs=specs,
        nets={k: {n: t.detach().clone() for n, t in v.state_dict().items()} for k, v in nets.items()},
        optim={k: _clone_state(o.state_dict()) for k, o in opts.items()},
        rng={"torch": torch.get_rng_state().clone()},
        extra=ex,
    )


def _clone_state(sd):
    if isinstance(sd, dict):
        return {k: _clone_state(v) for k, v in sd.items()}
    if isinstance(sd, list):
        return [_clone_state(v) for v in sd]
    if isinstance(sd, torch.Tensor):
        return sd.detach().clone()
    return sd


# ------------------------------------------------------------------ training loop


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    log: list
    nets: dict

    def column(self, name: str) -> np.ndarray:
        return np.array([r[name] for r in self.log])


class Session:
    """Networks, optimizers and data of one training run for one family."""

    def __init__(self, cfg: TrainConfig, family: str, samples, extras=None, resume: Checkpoint | None = None):
        if not samples:
            raise ConfigError("training set is empty")
        self.cfg = cfg
        self.family = family
        self.samples = list(samples)
        self.extras = extras or {}
        torch.set_num_threads(cfg.threads)
        torch.manual_seed(cfg.seed)
        self.nets = {k: build(s) for k, s in network_specs(cfg, family).items()}
        self.opts = {
            k: torch.optim.Adam(n.parameters(), lr=cfg.learning_rate, betas=(cfg.adam_beta1, cfg.adam_beta2))
            for k, n in self.nets.items()
        }
        self.step = 0
        self.total_steps = None
        if resume is not None:
            self._restore(resume)
        for n in self.nets.values():
            n.train()

    def _restore(self, ck: Checkpoint):
        ck.verify()
        if ck.family != self.family:
            raise CheckpointError(f"checkpoint family {ck.family} != {self.family}")
        for k, n in self.nets.items():
            n.load_state_dict(ck.nets[k])
        for k, o in self.opts.items():
            o.load_state_dict(_clone_state(ck.optim[k]))
        torch.set_rng_state(ck.rng["torch"])
        self.step = ck.step

    def batch(self, step: int) -> dict:
        cfg = self.cfg
        idx = batch_indices(cfg.seed, len(self.samples), cfg.batch_size, step)
        picked = [self.samples[i] for i in idx]
        if cfg.augment:
            picked = [augment_sample(s, seed=int(np.random.SeedSequence([cfg.seed, step, int(i)]).generate_state(1)[0]),
                                     jitter=cfg.jitter, flip_prob=cfg.flip_prob)
                      for s, i in zip(picked, idx)]
        return self.extras.get("prepare", _default_prepare)(picked, cfg, self.extras)

    def _guarded(self, fn, *args):
        # NaN scores fail the [0, 1] range check inside the losses; report those as divergence.
        try:
            return fn(*args)
        except ValueError as exc:
            pool = [*_tensors(args[3]), *(q for n in self.nets.values() for q in n.parameters())]
            if any(not torch.isfinite(v).all() for v in pool):
                raise TrainingDiverged(
                    f"{self.cfg.method}/{self.family}: non-finite activations at step {self.step} ({exc})") from exc
            raise

    def d_update(self, batch: dict, fakes: dict) -> torch.Tensor:
        d_names = [k for k in self.nets if k.startswith("D")]
        for k in d_names:
            self.opts[k].zero_grad(set_to_none=True)
        loss = self._guarded(d_loss, self.family, self.nets, batch, fakes, self.cfg.smooth)
        if not torch.isfinite(loss):
            raise TrainingDiverged(f"{self.cfg.method}/{self.family}: non-finite discriminator loss at step {self.step}")
        loss.backward()
        for k in d_names:
            self.opts[k].step()
        return loss.detach()

    def g_update(self, batch: dict, fakes: dict) -> L.LossReport:
        g_names = generator_names(self.nets)
        for k in g_names:
            self.opts[k].zero_grad(set_to_none=True)
        rep = self._guarded(g_loss, self.family, self.nets, batch, fakes, self.cfg)
        if not torch.isfinite(rep.total):
            raise TrainingDiverged(
                f"{self.cfg.method}/{self.family}: non-finite generator loss at step {self.step} "
                f"(adv_g={float(rep.adv_g)}, l1_img={float(rep.l1_img)})"
            )
        rep.total.backward()
        for k in g_names:
            self.opts[k].step()
        return rep

    def lr_at(self, step: int) -> float:
        cfg = self.cfg
        if not cfg.lr_decay or not self.total_steps:
            return cfg.learning_rate
        start = self.total_steps * (1 - cfg.lr_decay)
        if step < start:
            return cfg.learning_rate
        return cfg.learning_rate * max(0.0, (self.total_steps - step) / (self.total_steps - start))

    def train_step(self) -> dict:
        lr = self.lr_at(self.step)
        for o in self.opts.values():
            for g in o.param_groups:
                g["lr"] = lr
        batch = self.batch(self.step)
        fakes = generate(self.family, self.nets, batch)
        adv_d = self.d_update(batch, fakes)
        rep = self.g_update(batch, fakes)
        rep.adv_d = adv_d
        row = rep.row(self.step + 1)
        self.step += 1
        return row

    def run(self, n_steps: int, log_path=None) -> list:
        rows = []
        self.total_steps = n_steps
        per_epoch = math.ceil(len(self.samples) / self.cfg.batch_size)
        epoch_rows = []
        while self.step < n_steps:
            row = self.train_step()
            rows.append(row)
            epoch_rows.append(row)
            if self.step % per_epoch == 0 or self.step == n_steps:
                means = {k: np.mean([r[k] for r in epoch_rows]) for k in L.LOG_COLUMNS[1:]}
                log.info("%s epoch %d (step %d): %s", self.family, math.ceil(self.step / per_epoch), self.step,
                         " ".join(f"{k}={v:.4f}" for k, v in means.items()))
                epoch_rows = []
        if log_path is not None:
            write_log(log_path, rows, append=self.step > len(rows))
        return rows

    def recalibrate_bn(self):
        """Replace generator running statistics by exact averages of the per-batch
        statistics seen in one pass over the training set (dropout off)."""
        g_names = generator_names(self.nets)
        bns = [m for k in g_names for m in self.nets[k].modules() if isinstance(m, torch.nn.modules.batchnorm._BatchNorm)]
        if not bns:
            return
        modes = {k: n.training for k, n in self.nets.items()}
        saved = [m.momentum for m in bns]
        for k in g_names:
            self.nets[k].train()
            for m in self.nets[k].modules():
                if isinstance(m, torch.nn.Dropout):
                    m.eval()
        for m in bns:
            m.reset_running_stats()
            m.momentum = None
        prepare = self.extras.get("prepare", _default_prepare)
        bs = self.cfg.batch_size
        with torch.no_grad():
            for i in range(0, len(self.samples), bs):
                generate(self.family, self.nets, prepare(self.samples[i:i + bs], self.cfg, self.extras))
        for m, mom in zip(bns, saved):
            m.momentum = mom
        for k, n in self.nets.items():
            n.train(modes[k])

    def checkpoint(self, extra=None) -> Checkpoint:
        per_epoch = math.ceil(len(self.samples) / self.cfg.batch_size)
        return make_checkpoint(self.cfg, self.family, self.step, self.step // per_epoch,
                               self.nets, self.opts, extra)


def _default_prepare(samples, cfg, extras):
    return conditioning_and_targets(samples, cfg)


def write_log(path, rows, append=False):
    path = Path(path)
    new = not append or not path.exists()
    with path.open("w" if new else "a", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(L.LOG_COLUMNS))
        if new:
            w.writeheader()
        for r in rows:
            w.writerow({k: (r[k] if k == "step" else f"{r[k]:.8g}") for k in L.LOG_COLUMNS})


def read_log(path) -> list[dict]:
    with Path(path).open() as fh:
        return [{k: (int(v) if k == "step" else float(v)) for k, v in r.items()} for r in csv.DictReader(fh)]


def _homography_extra(homography: Homography | None):
    return {"homography": homography.m.tolist()} if homography is not None else {}


def train(cfg: TrainConfig, data, out_dir=None, resume: Checkpoint | None = None,
          homography: Homography | None = None) -> TrainResult:
    """Alternate one discriminator and one generator update per batch.

    ``data`` is a list of training samples. With ``out_dir`` the step log
    (``log.csv``) and the final checkpoint (``checkpoint.pt``) are written there.
    """
    if cfg.method == "h-regions":
        raise ConfigError("use train_h_regions for the h-regions method")
    sess = Session(cfg, cfg.family, data, resume=resume)
    n = total_steps(cfg, len(sess.samples), steps=cfg.steps)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    rows = sess.run(n, log_path=out / "log.csv" if out else None)
    if cfg.bn_recalibrate:
        sess.recalibrate_bn()
    ck = sess.checkpoint(extra=_homography_extra(homography))
    if out is not None:
        ck.save(out / "checkpoint.pt")
    return TrainResult(ck, rows, sess.nets)


# ------------------------------------------------------------------ H-Regions


def region_masks_for(cfg: TrainConfig) -> RegionMaskSet:
    return default_region_masks(cfg.resolution, cfg.band_width)


def _regions_prepare(samples, cfg, extras):
    task = extras["task"]
    masks: RegionMaskSet = extras["masks"]
    m1, m2, band = masks.tensors()
    if any(s.warped_aerial is None for s in samples):
        raise ConfigError("h-regions needs homography-warped aerial images")
    warped = _chw([s.warped_aerial for s in samples])
    ground = _chw([s.ground for s in samples])
    batch = {"m1": m1, "m2": m2, "band": band, "warped": warped}
    if task == "inpaint":
        batch.update(cond=warped, img=ground)
    elif task == "car":
        batch.update(cond=warped * m2, img=ground * m2)
    else:
        batch.update(cond=extras["composite_of"](samples, warped), img=ground)
    return batch


@dataclass
class RegionsResult:
    inpaint: TrainResult
    car: TrainResult
    realism: TrainResult
    masks: RegionMaskSet

    @property
    def checkpoints(self) -> tuple:
        return self.inpaint.checkpoint, self.car.checkpoint, self.realism.checkpoint


def region_composite(inpaint_net, car_net, warped: torch.Tensor, masks: RegionMaskSet) -> torch.Tensor:
    """Inference-mode subtask I/II outputs pasted into the warped image."""
    m1, m2, _ = masks.tensors()
    with torch.no_grad():
        was = inpaint_net.training, car_net.training
        inpaint_net.eval()
        car_net.eval()
        inpaint = inpaint_net(warped)
        car = car_net(warped * m2) * m2
        inpaint_net.train(was[0])
        car_net.train(was[1])
    return composite_regions(inpaint, car, warped, masks)


def train_h_regions(cfg: TrainConfig, data, out_dir=None, homography: Homography | None = None) -> RegionsResult:
    """Three sequential subtasks: inpaint R1, synthesize the car region R2, then realism.

    Subtask networks are independent. The realism network trains on the
    composite assembled from the frozen subtask I and II generators.
    """
    if cfg.method != "h-regions":
        raise ConfigError("train_h_regions requires method h-regions")
    masks = region_masks_for(cfg)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        masks.save(out / "masks")
    extra = _homography_extra(homography)
    extra["band_width"] = int(cfg.band_width) if cfg.band_width is not None else None
    results = {}
    n = len(data)

    def run(task, epochs, steps, extras):
        sess = Session(cfg, task, data, extras={"prepare": _regions_prepare, "task": task, "masks": masks, **extras})
        rows = sess.run(total_steps(cfg, n, epochs, steps),
                        log_path=out / f"log_{task}.csv" if out else None)
        if cfg.bn_recalibrate:
            sess.recalibrate_bn()
        ck = sess.checkpoint(extra=extra)
        if out is not None:
            ck.save(out / f"checkpoint_{task}.pt")
        results[task] = TrainResult(ck, rows, sess.nets)
        return sess

    s1 = run("inpaint", cfg.inpaint_epochs, cfg.inpaint_steps, {})
    s2 = run("car", cfg.car_epochs, cfg.car_steps, {})
    g1, g2 = s1.nets["G"], s2.nets["G"]
    cache = {}

    def composite_of(samples, warped):
        key = tuple(s.id for s in samples)
        if key not in cache or cfg.augment:
            cache[key] = region_composite(g1, g2, warped, masks)
        return cache[key]

    run("realism", cfg.realism_epochs, cfg.realism_steps, {"composite_of": composite_of})
    return RegionsResult(results["inpaint"], results["car"], results["realism"], masks)


# ------------------------------------------------------------------ inference


def _as_batch(image) -> tuple[torch.Tensor, bool]:
    if isinstance(image, torch.Tensor):
        t = image.float()
    else:
        t = torch.from_numpy(np.ascontiguousarray(np.asarray(image, dtype=np.float32)))
        t = t.permute(2, 0, 1) if t.dim() == 3 else t.permute(0, 3, 1, 2)
        t = t.contiguous()
    single = t.dim() == 3
    return (t[None] if single else t), single


def _to_hwc(t: torch.Tensor, single: bool) -> np.ndarray:
    a = t.detach().cpu().numpy().transpose(0, 2, 3, 1)
    return a[0] if single else a


def checkpoint_homography(ck: Checkpoint) -> Homography | None:
    m = ck.extra.get("homography")
    return Homography(np.array(m)) if m is not None else None


def prepare_input(ck: Checkpoint, image, prewarped: bool = False):
    """Warp an aerial input with the checkpoint's homography for h-* methods."""
    cfg = ck.cfg
    if cfg.uses_homography and not prewarped:
        h = checkpoint_homography(ck)
        if h is None:
            raise CheckpointError("checkpoint has no homography; pass a pre-warped input")
        arr = np.asarray(image, dtype=np.float32)
        if arr.ndim == 3:
            return warp_image(arr, h)[0].astype(np.float32)
        return np.stack([warp_image(a, h)[0] for a in arr]).astype(np.float32)
    return image


def synthesize(ck: Checkpoint, image, prewarped: bool = False):
    """Inference-mode forward. Returns the image, or ``(image, segmap)`` for so/fork/seq."""
    if ck.family in REGION_TASKS:
        raise CheckpointError("h-regions checkpoints chain three networks; use synthesize_regions")
    nets = ck.build_nets()
    x, single = _as_batch(prepare_input(ck, image, prewarped))
    with torch.no_grad():
        out = generate(ck.family, nets, {"cond": x})
    if "seg" in out:
        return _to_hwc(out["img"], single), _to_hwc(out["seg"], single)
    return _to_hwc(out["img"], single)


def synthesize_regions(checkpoints, image, prewarped: bool = False, return_composite: bool = False):
    """Replay the H-Regions chain: inpaint and car networks, composite, realism."""
    ck1, ck2, ck3 = checkpoints
    for ck, task in zip(checkpoints, REGION_TASKS):
        if ck.family != task:
            raise CheckpointError(f"expected a {task} checkpoint, got {ck.family}")
    if len({ck.fingerprint for ck in checkpoints}) != 1:
        raise CheckpointError("H-Regions checkpoints come from different configs")
    cfg = ck1.cfg
    masks = region_masks_for(cfg)
    x, single = _as_batch(prepare_input(ck1, image, prewarped))
    g1, g2, g3 = ck1.build_nets()["G"], ck2.build_nets()["G"], ck3.build_nets()["G"]
    comp = region_composite(g1, g2, x, masks)
    with torch.no_grad():
        final = g3(comp)
    if return_composite:
        return _to_hwc(final, single), _to_hwc(comp, single)
    return _to_hwc(final, single)


def evaluate_l1(ck_or_nets, samples, cfg: TrainConfig | None = None, family: str | None = None) -> float:
    """Inference-mode mean L1 of the image output over ``samples``."""
    if isinstance(ck_or_nets, Checkpoint):
        nets, cfg, family = ck_or_nets.build_nets(), ck_or_nets.cfg, ck_or_nets.family
    else:
        nets = ck_or_nets
    modes = {k: n.training for k, n in nets.items()}
    for n in nets.values():
        n.eval()
    total, count = 0.0, 0
    with torch.no_grad():
        for i in range(0, len(samples), 16):
            batch = conditioning_and_targets(samples[i:i + 16], cfg)
            out = generate(family, nets, batch)
            total += float((out["img"] - batch["img"]).abs().sum())
            count += batch["img"].numel()
    for k, n in nets.items():
        n.train(modes[k])
    return total / count
