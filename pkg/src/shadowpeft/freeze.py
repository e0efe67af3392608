"""Freeze policies: which parameter groups train and which stay frozen.

Groups are dotted paths over *canonical* parameter names. The full
pipeline remaps encoder adapter weights under ``image_encoder.adapters``
so the standard policy can freeze the encoder base with a single group
name; fine-grained paths (e.g. ``image_encoder.adapters.blocks.3.adapter1``)
also work because membership is longest-prefix match.
"""

from dataclasses import dataclass, field

import torch.nn as nn

from .errors import ConfigError


@dataclass(frozen=True)
class FreezePolicy:
    trainable_groups: frozenset = field(default_factory=frozenset)
    frozen_groups: frozenset = field(default_factory=frozenset)

    def __post_init__(self):
        overlap = set(self.trainable_groups) & set(self.frozen_groups)
        if overlap:
            raise ConfigError(f"groups in both sets: {sorted(overlap)}")

    @property
    def groups(self):
        return set(self.trainable_groups) | set(self.frozen_groups)


def standard_freeze_policy(freeze_backbone=True):
    """Adapters, mask decoder and the prompt-generator decoder train;
    encoder base and prompt encoder stay frozen. The pyramid backbone is
    frozen unless toggled for ablation."""
    trainable = {"image_encoder.adapters", "mask_decoder", "prompt_generator.decoder"}
    frozen = {"image_encoder.base", "prompt_encoder"}
    (frozen if freeze_backbone else trainable).add("prompt_generator.backbone")
    return FreezePolicy(frozenset(trainable), frozenset(frozen))


def resolve_policy(model: nn.Module, policy: FreezePolicy):
    """Drop policy groups that match no parameter of this model.

    Ablation variants may omit whole modules (e.g. a model built without
    adapters); the standard policy still applies to the remaining groups.
    """
    names = [canonical_name(n) for n, _ in model.named_parameters()]

    def used(g):
        return any(c == g or c.startswith(g + ".") for c in names)

    return FreezePolicy(
        frozenset(g for g in policy.trainable_groups if used(g)),
        frozenset(g for g in policy.frozen_groups if used(g)),
    )


def canonical_name(name):
    """Map a raw parameter name to its canonical group path."""
    if name.startswith("image_encoder."):
        rest = name[len("image_encoder."):]
        if ".adapter1." in name or ".adapter2." in name:
            return "image_encoder.adapters." + rest
        return "image_encoder.base." + rest
    return name


def _assignments(model: nn.Module, policy: FreezePolicy):
    """Longest-prefix group for every parameter; errors on gaps."""
    groups = sorted(policy.groups, key=len, reverse=True)
    out = {}
    uncovered = []
    matched = set()
    for name, param in model.named_parameters():
        cname = canonical_name(name)
        for g in groups:
            if cname == g or cname.startswith(g + "."):
                out[name] = g
                matched.add(g)
                break
        else:
            uncovered.append(cname)
    unknown = policy.groups - matched
    if unknown:
        valid = sorted({canonical_name(n).rsplit(".", 1)[0] for n, _ in model.named_parameters()})
        raise ConfigError(
            f"unknown parameter groups {sorted(unknown)}; valid prefixes include {valid}"
        )
    if uncovered:
        raise ConfigError(f"policy does not cover parameters: {uncovered[:5]}")
    return out


def apply_freeze_policy(model: nn.Module, policy: FreezePolicy):
    """Disable gradients exactly on the frozen groups. Returns the model."""
    assign = _assignments(model, policy)
    frozen = set(policy.frozen_groups)
    params = dict(model.named_parameters())
    for name, group in assign.items():
        params[name].requires_grad_(group not in frozen)
    return model


def freeze_batchnorm_stats(model: nn.Module, policy: FreezePolicy):
    """Put normalization layers whose parameters are all frozen into eval
    mode so running statistics stay fixed during training."""
    assign = _assignments(model, policy)
    frozen = set(policy.frozen_groups)
    for mod_name, module in model.named_modules():
        if not isinstance(module, (nn.BatchNorm1d, nn.BatchNorm2d, nn.BatchNorm3d)):
            continue
        own = [n for n in assign if n.startswith(mod_name + ".") or n == mod_name]
        if own and all(assign[n] in frozen for n in own):
            module.eval()


@dataclass
class CensusRow:
    group: str
    count: int
    trainable: bool


def parameter_census(model: nn.Module, policy: FreezePolicy):
    """Per-group parameter counts under a policy.

    Returns (trainable_count, frozen_count, rows); the two counts always
    sum to the model's total parameter count.
    """
    assign = _assignments(model, policy)
    params = dict(model.named_parameters())
    frozen = set(policy.frozen_groups)
    per_group = {g: 0 for g in sorted(policy.groups)}
    for name, group in assign.items():
        per_group[group] += params[name].numel()
    rows = [CensusRow(g, c, g not in frozen) for g, c in per_group.items()]
    trainable = sum(r.count for r in rows if r.trainable)
    total_frozen = sum(r.count for r in rows if not r.trainable)
    return trainable, total_frozen, rows


def census_table(trainable, frozen, rows):
    """Plain-text census table."""
    width = max(len(r.group) for r in rows) if rows else 5
    lines = [f"{'group':<{width}}  {'params':>12}  trainable"]
    for r in rows:
        lines.append(f"{r.group:<{width}}  {r.count:>12,}  {'yes' if r.trainable else 'no'}")
    lines.append(f"{'total trainable':<{width}}  {trainable:>12,}")
    lines.append(f"{'total frozen':<{width}}  {frozen:>12,}")
    lines.append(f"{'total':<{width}}  {trainable + frozen:>12,}")
    return "\n".join(lines)
