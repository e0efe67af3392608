"""Training, inference, evaluation and the ablation harness.

Per step: forward the coarse mask, focal-supervise it against the ground
truth, assemble prompts from the detached coarse mask, run the frozen
prompt encoder and trainable mask decoder, focal-supervise the final
mask, and step the optimizer on the trainable groups only.
"""

import csv
import math
import os
from dataclasses import dataclass, field, replace

import numpy as np
import torch

from .config import RunConfig, config_from_dict, echo_config
from .data import (DatasetSample, augment, load_dataset, make_profile,
                   resize_normalize)
from .errors import CheckpointError, NumericError, RequestError
from .freeze import (apply_freeze_policy, freeze_batchnorm_stats,
                     standard_freeze_policy, resolve_policy)
from .losses import focal_loss
from .metrics import aggregate_ber, ber_compute, binarize
from .segmenter import build_model

CHECKPOINT_VERSION = 1

# Fields that must agree between a checkpoint and the active config for
# the stored tensors to fit the model.
_MODEL_FIELDS = ("model", "input_size", "mask_size", "backbone", "top_channels",
                 "adapter_ratio", "adapter_scale", "adapter_mha", "adapter_ffn")


@dataclass
class TrainResult:
    checkpoint_path: str
    history: list = field(default_factory=list)  # per-epoch dicts
    loss_history: list = field(default_factory=list)  # per-step combined loss
    model: object = None


def save_checkpoint(path, model, cfg: RunConfig, epoch, history):
    """Store trainable parameters, runtime buffers and a config snapshot.

    Frozen weights are not stored; they are re-derived from the base
    checkpoint (or the seeded init) when the model is rebuilt.
    """
    params = {n: p.detach().clone() for n, p in model.named_parameters()
              if p.requires_grad}
    buffers = {n: b.detach().clone() for n, b in model.named_buffers()}
    torch.save({
        "version": CHECKPOINT_VERSION,
        "params": params,
        "buffers": buffers,
        "config": cfg.to_dict(),
        "epoch": epoch,
        "history": history,
    }, path)


def load_checkpoint(path, cfg: RunConfig | None = None):
    """Rebuild the model from a checkpoint; returns (model, cfg, payload)."""
    data = torch.load(path, map_location="cpu", weights_only=False)
    if data.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"checkpoint version {data.get('version')} != supported {CHECKPOINT_VERSION}")
    stored = config_from_dict({k: str(v) for k, v in data["config"].items()})
    if cfg is not None:
        diverged = [f for f in _MODEL_FIELDS
                    if getattr(cfg, f) != getattr(stored, f)]
        if diverged:
            raise CheckpointError(
                f"config/checkpoint mismatch on fields: {diverged}")
    cfg = cfg or stored
    model = build_model(cfg.model_config(), cfg.sampling_config())
    apply_freeze_policy(model, resolve_policy(model, standard_freeze_policy(cfg.freeze_backbone)))
    state = dict(data["params"])
    state.update(data["buffers"])
    missing_model = [k for k in state if k not in dict(model.state_dict())]
    if missing_model:
        raise CheckpointError(f"checkpoint tensors not in model: {missing_model[:5]}")
    model.load_state_dict(state, strict=False)
    return model, cfg, data


def _augment_seed(seed, epoch, idx):
    return (seed * 1_000_003 + epoch * 9_176 + idx) & 0x7FFFFFFF


def _prepare_batch(samples, indices, cfg, spec, epoch, training):
    images, masks = [], []
    for idx in indices:
        s = samples[idx]
        if training and cfg.augment:
            s = augment(s, _augment_seed(cfg.seed, epoch, idx),
                        crop_scale=(cfg.crop_min, 1.0))
        img, mask, _ = resize_normalize(s, cfg.input_size, cfg.mask_size,
                                        spec.pixel_mean, spec.pixel_std)
        images.append(img)
        masks.append(mask)
    return torch.stack(images), torch.stack(masks)


def train(cfg: RunConfig, samples=None, model=None, run_dir=None, max_steps=None,
          eval_every=1):
    """Train per the freezing/optimizer protocol; writes metrics.csv and
    checkpoints into the run directory. ``eval_every`` controls how often
    the per-epoch training BER is computed (the final epoch always is)."""
    run_dir = run_dir or cfg.run_dir
    ckpt_dir = os.path.join(run_dir, "checkpoints")
    os.makedirs(ckpt_dir, exist_ok=True)
    echo_config(cfg, os.path.join(run_dir, "config.txt"))

    torch.manual_seed(cfg.seed)
    if samples is None:
        samples = load_dataset(make_profile(cfg.profile, cfg.root, cfg.split))
    if model is None:
        model = build_model(cfg.model_config(), cfg.sampling_config())
    policy = resolve_policy(model, standard_freeze_policy(cfg.freeze_backbone))
    apply_freeze_policy(model, policy)
    trainable = [p for p in model.parameters() if p.requires_grad]
    optimizer = None
    if trainable:
        optimizer = torch.optim.Adam(trainable, lr=cfg.learning_rate,
                                     betas=(cfg.beta1, cfg.beta2))
    focal = cfg.focal_params()
    spec = model.image_encoder.spec
    order_rng = np.random.default_rng(cfg.seed)

    history, loss_history = [], []
    best_ber = math.inf
    last_path = os.path.join(ckpt_dir, "last.pt")
    best_path = os.path.join(ckpt_dir, "best.pt")
    step = 0
    stop = False
    with open(os.path.join(run_dir, "metrics.csv"), "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "coarse_loss", "final_loss", "lr", "epoch"])
        for epoch in range(cfg.epochs):
            model.train()
            freeze_batchnorm_stats(model, policy)
            order = order_rng.permutation(len(samples))
            for start in range(0, len(order), cfg.batch_size):
                indices = order[start:start + cfg.batch_size]
                images, masks = _prepare_batch(samples, indices, cfg, spec,
                                               epoch, training=True)
                coarse, final, _ = model(images)
                loss_c = focal_loss(coarse, masks, focal)
                loss_f = focal_loss(final, masks, focal)
                loss = (cfg.coarse_loss_weight * loss_c
                        + cfg.final_loss_weight * loss_f)
                if not torch.isfinite(loss):
                    raise NumericError(
                        f"non-finite loss at step {step} (epoch {epoch}): "
                        f"coarse={loss_c.item()}, final={loss_f.item()}")
                if optimizer is not None:
                    optimizer.zero_grad()
                    loss.backward()
                    optimizer.step()
                writer.writerow([step, repr(loss_c.item()), repr(loss_f.item()),
                                 repr(cfg.learning_rate), epoch])
                loss_history.append(loss.item())
                step += 1
                if max_steps is not None and step >= max_steps:
                    stop = True
                    break
            last_epoch = stop or epoch == cfg.epochs - 1
            if last_epoch or epoch % eval_every == 0:
                _, agg = evaluate(model, samples, cfg)
                history.append({"epoch": epoch, "train_ber": agg.ber})
                save_checkpoint(last_path, model, cfg, epoch, history)
                if agg.ber < best_ber:
                    best_ber = agg.ber
                    save_checkpoint(best_path, model, cfg, epoch, history)
            if stop:
                break
    return TrainResult(checkpoint_path=best_path, history=history,
                       loss_history=loss_history, model=model)


def infer(model, image):
    """Run the full pipeline on one (H, W, 3) image in [0,1].

    Returns (binary mask at original resolution, coarse mask, prompt set).
    """
    model.eval()
    spec = model.image_encoder.spec
    h, w = image.shape[:2]
    sample = DatasetSample(np.asarray(image, dtype=np.float32),
                           np.zeros((h, w), dtype=np.uint8), "query", (h, w))
    img, _, _ = resize_normalize(sample, model.input_size, model.mask_size,
                                 spec.pixel_mean, spec.pixel_std)
    with torch.no_grad():
        coarse, final, prompt_sets = model(img[None])
    prob = final[0]
    binary = torch.nn.functional.interpolate(
        prob[None, None], size=(h, w), mode="nearest")[0, 0].numpy()
    return binarize(binary, 0.5), coarse[0].numpy(), prompt_sets[0]


def evaluate(model, samples, cfg: RunConfig):
    """Per-image BER reports plus the dataset aggregate."""
    model.eval()
    reports = []
    for s in samples:
        pred, _, _ = infer(model, s.image)
        reports.append(ber_compute(pred, s.gt_mask))
    return reports, aggregate_ber(reports, pixel_pooled=(cfg.aggregate == "pixel"))


@dataclass
class AblationCell:
    name: str
    overrides: dict


def component_analysis_cells():
    """The five-row component toggle matrix: adapters in attention and
    feed-forward, backbone freezing, and point prompts on top of the
    decoder-only baseline."""
    return [
        AblationCell("baseline", dict(adapter_mha="false", adapter_ffn="false",
                                      freeze_backbone="false", prompt_mode="none")),
        AblationCell("point", dict(adapter_mha="false", adapter_ffn="false",
                                   freeze_backbone="false", prompt_mode="point")),
        AblationCell("point+mha", dict(adapter_mha="true", adapter_ffn="false",
                                       freeze_backbone="false", prompt_mode="point")),
        AblationCell("point+mha+ffn", dict(adapter_mha="true", adapter_ffn="true",
                                           freeze_backbone="false", prompt_mode="point")),
        AblationCell("point+mha+ffn+freeze", dict(adapter_mha="true", adapter_ffn="true",
                                                  freeze_backbone="true", prompt_mode="point")),
    ]


def grid_size_cells(sizes=(12, 16, 24, 32)):
    return [
        AblationCell(f"grid{g}", dict(strategy="grid", prompt_mode="point",
                                      grid_size=str(g), k="1"))
        for g in sizes
    ]


def parse_matrix_file(path):
    """Matrix file: one cell per line, ``name: key=val, key=val``."""
    cells = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if ":" not in line:
                raise RequestError(f"{path}:{lineno}: expected 'name: key=val,...'")
            name, rest = (part.strip() for part in line.split(":", 1))
            overrides = {}
            if rest:
                for item in rest.split(","):
                    key, val = (part.strip() for part in item.split("=", 1))
                    overrides[key] = val
            cells.append(AblationCell(name, overrides))
    return cells


def run_ablation(cells, base_cfg: RunConfig, samples=None, run_dir=None,
                 max_steps=None):
    """Train and evaluate every cell with a shared seed; returns rows of
    {name, ber, ber_s, ber_ns}."""
    run_dir = run_dir or os.path.join(base_cfg.run_dir, "ablation")
    base_dict = base_cfg.to_dict()
    rows = []
    for cell in cells:
        raw = dict(base_dict)
        raw.update(cell.overrides)
        raw = {k: str(v) for k, v in raw.items()}
        cfg = config_from_dict(raw)
        cfg = replace(cfg, run_dir=os.path.join(run_dir, cell.name))
        result = train(cfg, samples=samples, run_dir=cfg.run_dir,
                       max_steps=max_steps, eval_every=max(cfg.epochs, 1))
        eval_samples = samples
        if eval_samples is None:
            eval_samples = load_dataset(make_profile(cfg.profile, cfg.root, cfg.split))
        _, agg = evaluate(result.model, eval_samples, cfg)
        rows.append({"name": cell.name, "ber": agg.ber, "ber_s": agg.ber_s,
                     "ber_ns": agg.ber_ns})
    return rows
