"""Epoch orchestration (Train-Template, Train-PL, Infer-PL) and checkpoints.

Modes:

* ``sla``         one model per landmark, epochs of Train-PL then Infer-PL
* ``sla_atd``     as ``sla`` with a Train-Template stage first
* ``adapter_atd`` one joint model with K adapters; each batch trains one
                  sampled landmark, Infer-PL refreshes every landmark
"""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import logging
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from .augment import AffineAugParams, TemplateSet, augment_patch, build_augmented_template_set, crop_patch
from .datamodel import (
    Frame, ImageRecord, LandmarkPoint, PseudoLabelStore, clamp_to_croppable, croppable_bounds,
)
from .errors import CheckpointError, ConfigError, ContractError
from .ingest import DatasetSplit
from .network import AdapterBank, build_backbone, build_bank, load_tensor_dir, save_tensor_dir, trainable_parameters
from .ssl import CascadeConfig, cascade_argmax, cosine_maps, gather_centers, matching_loss

log = logging.getLogger(__name__)

MODES = ("sla", "sla_atd", "adapter_atd")


@dataclass(frozen=True)
class TrainConfig:
    mode: str = "sla_atd"
    K: int = 19
    epochs: int = 300
    batch_size: int = 8
    learning_rate: float = 1e-4
    optimizer: str = "adam"
    adam_betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    seed: int = 0
    input_size: int = 384
    patch_size: int = 192
    C_A: int = 16
    E: int = 128
    decoder_channels: tuple[int, ...] = (64, 128, 256, 256)
    rfb_channels: int = 256
    template_aug_n: int = 500
    ssl: CascadeConfig = field(default_factory=CascadeConfig)
    aug: AffineAugParams = field(default_factory=AffineAugParams)
    backbone: dict = field(default_factory=lambda: {"type": "tiny", "channels": [16, 32, 64, 64, 64], "seed": 0})
    deterministic: bool = True

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.K < 1:
            raise ConfigError("K must be >= 1")
        if self.optimizer != "adam":
            raise ConfigError(f"unsupported optimizer {self.optimizer!r}")
        if self.learning_rate < 0:
            raise ConfigError("learning_rate must be >= 0")
        if self.input_size % 16 or self.patch_size % 16:
            raise ConfigError("input_size and patch_size must be divisible by 16")
        if self.patch_size > self.input_size:
            raise ConfigError("patch_size cannot exceed input_size")
        if self.C_A < 0:
            raise ConfigError("C_A must be >= 0")
        if self.mode != "sla" and self.template_aug_n < 1:
            raise ConfigError("template_aug_n must be >= 1 for ATD modes")

    @property
    def uses_template_stage(self) -> bool:
        return self.mode in ("sla_atd", "adapter_atd")

    @property
    def joint(self) -> bool:
        return self.mode == "adapter_atd"

    def to_dict(self) -> dict:
        return json.loads(json.dumps(dataclasses.asdict(self)))

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def derive_seed(*parts: int) -> int:
    return int(np.random.SeedSequence([int(p) for p in parts]).generate_state(1)[0])


def new_bank(cfg: TrainConfig, landmark_ids: Sequence[int], seed: int) -> AdapterBank:
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return AdapterBank(build_backbone(cfg.backbone), landmark_ids, cfg.C_A, cfg.decoder_channels,
                           cfg.rfb_channels, None, cfg.E)


# ---------------------------------------------------------------------------
# Optimizer state
# ---------------------------------------------------------------------------

@dataclass
class TrainState:
    """Optimizer plus the bookkeeping a stage needs to take steps."""

    optimizer: torch.optim.Optimizer
    mode: str  # "sla" or "adapter" parameter selection
    rng: np.random.Generator
    landmark_ids: tuple[int, ...]
    steps: int = 0
    sampled: list[int] = field(default_factory=list)
    last_losses: list[float] = field(default_factory=list)

    def pick_landmark(self) -> int:
        k = int(self.landmark_ids[int(self.rng.integers(len(self.landmark_ids)))])
        self.sampled.append(k)
        return k


def make_state(bank: AdapterBank, cfg: TrainConfig, seed: int) -> TrainState:
    params = [p for p in bank.parameters() if p.requires_grad]
    opt = torch.optim.Adam(params, lr=cfg.learning_rate, betas=tuple(cfg.adam_betas), eps=cfg.adam_eps)
    return TrainState(opt, "adapter" if cfg.joint else "sla", np.random.default_rng(seed), bank.landmark_ids)


def _images_tensor(arrays: Sequence[np.ndarray], dtype=torch.float32) -> torch.Tensor:
    return torch.from_numpy(np.stack([np.asarray(a, dtype=np.float32) for a in arrays]))[:, None].to(dtype)


def optimize_batch(bank: AdapterBank, state: TrainState, images: Sequence[np.ndarray], patches,
                   targets: Sequence[LandmarkPoint], k: int, ssl_cfg: CascadeConfig) -> float:
    """One optimizer step on a batch of (image, augmented patch, target) triples."""
    bank.train()
    q = bank.embed(_images_tensor(images), k)
    p = bank.embed(_images_tensor([pt.pixels for pt in patches]), k)
    centers = torch.tensor([[pt.center_in_patch.x, pt.center_in_patch.y] for pt in patches], dtype=torch.float64)
    vecs, valid = gather_centers(p, centers)
    maps = cosine_maps(q, vecs)
    t = torch.tensor([[tp.x, tp.y] for tp in targets], dtype=torch.float64)
    loss = matching_loss(maps, t, valid, ssl_cfg).mean()
    state.optimizer.zero_grad(set_to_none=True)
    loss.backward()
    allowed = {id(x) for x in trainable_parameters(bank, state.mode, k)}
    for group in state.optimizer.param_groups:
        for param in group["params"]:
            if id(param) not in allowed:
                param.grad = None
    state.optimizer.step()
    state.steps += 1
    return float(loss.detach())


def _batches(n: int, batch_size: int, rng: np.random.Generator) -> list[np.ndarray]:
    order = rng.permutation(n)
    return [order[i:i + batch_size] for i in range(0, n, batch_size)]


# ---------------------------------------------------------------------------
# Stages
# ---------------------------------------------------------------------------

def train_template_stage(bank: AdapterBank, templates: TemplateSet, k: int | None, state: TrainState,
                         cfg: TrainConfig) -> TrainState:
    """Train on crops around the template landmarks of every augmented template.

    ``k=None`` samples one landmark per batch (joint mode).
    """
    if len(templates) == 0:
        raise ContractError("template set is empty")
    losses = []
    for idx in _batches(len(templates), cfg.batch_size, state.rng):
        kk = state.pick_landmark() if k is None else k
        imgs, patches, targets = [], [], []
        for i in idx:
            img, pts = templates.items[i]
            target = pts[kk - 1]
            patch = augment_patch(crop_patch(img, target, cfg.patch_size), cfg.aug, state.rng)
            imgs.append(img)
            patches.append(patch)
            targets.append(target)
        losses.append(optimize_batch(bank, state, imgs, patches, targets, kk, cfg.ssl))
    state.last_losses = losses
    return state


def train_pl_stage(bank: AdapterBank, train_images: Sequence[ImageRecord], store: PseudoLabelStore,
                   k: int | None, state: TrainState, cfg: TrainConfig) -> TrainState:
    """Train on crops around the current pseudo-labels."""
    ks = state.landmark_ids if k is None else (k,)
    for kk in ks:
        if not store.is_complete([r.id for r in train_images], kk):
            raise ContractError(f"pseudo-label store is incomplete for landmark {kk}")
    stamp = store.epoch_stamp
    losses = []
    for idx in _batches(len(train_images), cfg.batch_size, state.rng):
        kk = state.pick_landmark() if k is None else k
        imgs, patches, targets = [], [], []
        for i in idx:
            rec = train_images[i]
            target = store.get(rec.id, kk)
            patch = augment_patch(crop_patch(rec.resized, target, cfg.patch_size, rec.id), cfg.aug, state.rng)
            imgs.append(rec.resized)
            patches.append(patch)
            targets.append(target)
        losses.append(optimize_batch(bank, state, imgs, patches, targets, kk, cfg.ssl))
    if store.epoch_stamp != stamp:
        raise RuntimeError("pseudo-labels changed during Train-PL")
    state.last_losses = losses
    return state


@torch.no_grad()
def template_vectors(bank, template: ImageRecord, k: int, patch_size: int):
    """Center vectors of the un-augmented template patch around landmark ``k``."""
    patch = crop_patch(template.resized, template.gt_resized(k), patch_size, template.id)
    pyr = bank.embed(_images_tensor([patch.pixels]), k)
    c = torch.tensor([[patch.center_in_patch.x, patch.center_in_patch.y]], dtype=torch.float64)
    return gather_centers(pyr, c)


@torch.no_grad()
def predict_landmark(bank, template: ImageRecord, images: Sequence[ImageRecord], k: int, patch_size: int,
                     ssl_cfg: CascadeConfig, batch_size: int = 8) -> list[LandmarkPoint]:
    """Cascade-inferred location of landmark ``k`` on each image (resized frame, unclamped)."""
    if hasattr(bank, "eval"):
        bank.eval()
    vecs, _ = template_vectors(bank, template, k, patch_size)
    out = []
    for i in range(0, len(images), batch_size):
        chunk = images[i:i + batch_size]
        pyr = bank.embed(_images_tensor([r.resized for r in chunk]), k)
        maps = cosine_maps(pyr, [v.expand(len(chunk), -1) for v in vecs])
        for b in range(len(chunk)):
            x, y = cascade_argmax([m[b] for m in maps], ssl_cfg.window_px)
            out.append(LandmarkPoint(float(x), float(y), Frame.RESIZED))
    return out


def infer_pl_stage(bank, template: ImageRecord, train_images: Sequence[ImageRecord], k: int,
                   cfg: TrainConfig, store: PseudoLabelStore) -> int:
    """Refresh landmark ``k``'s pseudo-labels from the template patch; returns the clamp count."""
    preds = predict_landmark(bank, template, train_images, k, cfg.patch_size, cfg.ssl, cfg.batch_size)
    clamped = 0
    for rec, p in zip(train_images, preds):
        q = clamp_to_croppable(p, cfg.input_size, cfg.patch_size)
        clamped += q != p
        store.set(rec.id, k, q)
    store.epoch_stamp += 1
    return clamped


def init_pseudo_labels(store: PseudoLabelStore, image_ids: Sequence[str], ks: Sequence[int],
                       rng: np.random.Generator) -> None:
    lo, hi = croppable_bounds(store.image_size, store.patch_size)
    lo_i, hi_i = math.ceil(lo), math.floor(hi)
    for k in ks:
        for image_id in image_ids:
            x, y = rng.integers(lo_i, hi_i + 1, size=2)
            store.set(image_id, k, LandmarkPoint(float(x), float(y), Frame.RESIZED))


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

@dataclass
class Checkpoint:
    manifest: dict
    bank: AdapterBank
    pl_store: PseudoLabelStore
    path: Path | None = None


def save_checkpoint(path, bank: AdapterBank, pl_store: PseudoLabelStore, **meta) -> Checkpoint:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    tensors = {name: t.detach().cpu().numpy() for name, t in bank.state_dict().items()}
    entries = save_tensor_dir(tensors, path, write_manifest=False)
    manifest = {
        "format": 1,
        **meta,
        "K": bank.K,
        "landmark_ids": list(bank.landmark_ids),
        "adapter_groups": [f"landmark_{k}" for k in bank.landmark_ids] if bank.adapter_channels else [],
        "arch": bank.arch,
        "pl_epoch_stamp": pl_store.epoch_stamp,
        "image_size": pl_store.image_size,
        "patch_size": pl_store.patch_size,
        "tensors": entries,
    }
    (path / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    with open(path / "pseudo_labels.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["image_id", "landmark_id", "x", "y"])
        for (image_id, k), p in pl_store:
            w.writerow([image_id, k, repr(p.x), repr(p.y)])
    return Checkpoint(manifest, bank, pl_store, path)


def load_checkpoint(path, config_hash: str | None = None) -> Checkpoint:
    path = Path(path)
    mpath = path / "manifest.json"
    if not mpath.is_file():
        raise CheckpointError(f"missing manifest {mpath}")
    try:
        manifest = json.loads(mpath.read_text())
        arch = manifest["arch"]
        entries = manifest["tensors"]
    except (json.JSONDecodeError, KeyError) as exc:
        raise CheckpointError(f"{mpath}: malformed manifest ({exc})") from exc
    if config_hash is not None and manifest.get("config_hash") != config_hash:
        warnings.warn(f"checkpoint {path} was trained with config {manifest.get('config_hash')}, "
                      f"runtime config is {config_hash}; loading for inference anyway", stacklevel=2)
    tensors = load_tensor_dir(path, entries)
    bb_spec = dict(arch["backbone"])
    if bb_spec.get("type") == "vgg19":
        bb_spec["weights_dir"] = None
    bank = build_bank(arch, build_backbone(bb_spec))
    state = bank.state_dict()
    if set(state) != set(tensors):
        missing, extra = sorted(set(state) - set(tensors)), sorted(set(tensors) - set(state))
        raise CheckpointError(f"{path}: tensor set disagrees with architecture (missing {missing[:3]}, extra {extra[:3]})")
    for name, arr in tensors.items():
        if tuple(state[name].shape) != arr.shape:
            raise CheckpointError(f"tensor {name}: shape {arr.shape} does not match architecture {tuple(state[name].shape)}")
    bank.load_state_dict({n: torch.from_numpy(a) for n, a in tensors.items()})
    store = PseudoLabelStore(manifest["image_size"], manifest["patch_size"], epoch_stamp=manifest.get("pl_epoch_stamp", 0))
    pl_path = path / "pseudo_labels.csv"
    if pl_path.is_file():
        with open(pl_path, newline="") as fh:
            for row in csv.DictReader(fh):
                store.set(row["image_id"], int(row["landmark_id"]),
                          LandmarkPoint(float(row["x"]), float(row["y"]), Frame.RESIZED))
    return Checkpoint(manifest, bank, store, path)


def checkpoint_store(direction: str, path, bank: AdapterBank | None = None,
                     pl_store: PseudoLabelStore | None = None, **meta):
    """``save`` returns a Checkpoint; ``load`` returns ``(bank, pl_store)``."""
    if direction == "save":
        if bank is None or pl_store is None:
            raise ContractError("save needs a bank and a pseudo-label store")
        return save_checkpoint(path, bank, pl_store, **meta)
    if direction == "load":
        ck = load_checkpoint(path, meta.get("config_hash"))
        return ck.bank, ck.pl_store
    raise ContractError(f"unknown direction {direction!r}")


# ---------------------------------------------------------------------------
# Runs
# ---------------------------------------------------------------------------

class StageError(RuntimeError):
    def __init__(self, epoch: int, stage: str, k, cause: Exception):
        super().__init__(f"epoch {epoch}, stage {stage}, landmark {k}: {cause}")
        self.epoch, self.stage, self.k = epoch, stage, k


def set_deterministic(enabled: bool = True) -> None:
    torch.use_deterministic_algorithms(enabled)
    if enabled:
        torch.set_num_threads(1)


def train_model(data: DatasetSplit, cfg: TrainConfig, landmark_ids: Sequence[int],
                on_epoch: Callable[[dict], None] | None = None) -> tuple[AdapterBank, PseudoLabelStore, list[dict]]:
    """Train one bank serving ``landmark_ids`` (one id for SLA, all K for the joint model)."""
    model_key = landmark_ids[0] if len(landmark_ids) == 1 and not cfg.joint else 0
    bank = new_bank(cfg, landmark_ids, derive_seed(cfg.seed, model_key, 1))
    state = make_state(bank, cfg, derive_seed(cfg.seed, model_key, 2))
    train = list(data.train)
    store = PseudoLabelStore(cfg.input_size, cfg.patch_size)
    init_pseudo_labels(store, [r.id for r in train], landmark_ids, np.random.default_rng(derive_seed(cfg.seed, model_key, 3)))
    templates = None
    k_arg = None if cfg.joint else landmark_ids[0]
    history = []
    for epoch in range(1, cfg.epochs + 1):
        rec = {"epoch": epoch, "model": "joint" if cfg.joint else f"landmark_{landmark_ids[0]}"}
        stage = "train_template"
        try:
            if cfg.uses_template_stage:
                if templates is None:
                    templates = build_augmented_template_set(data.template, cfg.aug, cfg.template_aug_n,
                                                             derive_seed(cfg.seed, model_key, 4), cfg.patch_size)
                train_template_stage(bank, templates, k_arg, state, cfg)
                rec["train_template_loss"] = float(np.mean(state.last_losses))
            stage = "train_pl"
            train_pl_stage(bank, train, store, k_arg, state, cfg)
            rec["train_pl_loss"] = float(np.mean(state.last_losses))
            stage = "infer_pl"
            rec["infer_pl_clamped"] = sum(
                infer_pl_stage(bank, data.template, train, k, cfg, store) for k in landmark_ids
            )
        except Exception as exc:
            raise StageError(epoch, stage, "all" if cfg.joint else landmark_ids[0], exc) from exc
        history.append(rec)
        log.info("%s", json.dumps(rec))
        if on_epoch is not None:
            on_epoch(rec)
    return bank, store, history


def _train_one(args):
    data, cfg, ids = args
    set_deterministic(cfg.deterministic)
    return train_model(data, cfg, ids)


def run_training(data: DatasetSplit, cfg: TrainConfig, out_dir=None, jobs: int = 1) -> list[Checkpoint]:
    """Train every model the mode calls for and return one checkpoint per model.

    With ``out_dir`` the checkpoints are written to ``out_dir/<model>/`` and the
    per-epoch records to ``out_dir/run_log.jsonl``.
    """
    if data.K != cfg.K:
        raise ConfigError(f"dataset has K={data.K} landmarks but config says K={cfg.K}")
    if data.input_size != cfg.input_size:
        raise ConfigError(f"dataset resized to {data.input_size}, config expects {cfg.input_size}")
    set_deterministic(cfg.deterministic)
    groups = [tuple(range(1, cfg.K + 1))] if cfg.joint else [(k,) for k in range(1, cfg.K + 1)]
    if jobs > 1 and len(groups) > 1:
        from concurrent.futures import ProcessPoolExecutor
        import multiprocessing as mp

        with ProcessPoolExecutor(jobs, mp_context=mp.get_context("spawn")) as pool:
            results = list(pool.map(_train_one, [(data, cfg, g) for g in groups]))
    else:
        results = [train_model(data, cfg, g) for g in groups]

    out = []
    log_lines = []
    for ids, (bank, store, history) in zip(groups, results):
        name = "joint" if cfg.joint else f"landmark_{ids[0]:02d}"
        meta = {"mode": cfg.mode, "config_hash": cfg.config_hash(), "epoch": cfg.epochs,
                "template_id": data.template.id, "model": name, "ssl": dataclasses.asdict(cfg.ssl)}
        log_lines += history
        if out_dir is None:
            out.append(Checkpoint({**meta, "K": bank.K, "landmark_ids": list(bank.landmark_ids)}, bank, store))
        else:
            out.append(save_checkpoint(Path(out_dir) / name, bank, store, **meta))
    if out_dir is not None:
        with open(Path(out_dir) / "run_log.jsonl", "w") as fh:
            for rec in log_lines:
                fh.write(json.dumps(rec, sort_keys=True) + "\n")
    return out


def predict_all(checkpoints: Sequence[Checkpoint], template: ImageRecord, images: Sequence[ImageRecord],
                ssl_cfg: CascadeConfig | None = None) -> dict[tuple[str, int], LandmarkPoint]:
    """Predict every landmark served by ``checkpoints`` on ``images`` (resized frame)."""
    preds = {}
    for ck in checkpoints:
        cfg = ssl_cfg or CascadeConfig(**ck.manifest.get("ssl", {}))
        patch = ck.manifest.get("patch_size", ck.pl_store.patch_size)
        for k in ck.bank.landmark_ids:
            for rec, p in zip(images, predict_landmark(ck.bank, template, images, k, patch, cfg)):
                preds[(rec.id, k)] = p
    return preds
