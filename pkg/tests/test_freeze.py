import pytest
import torch
import torch.nn as nn

from shadowpeft.errors import ConfigError
from shadowpeft.freeze import (FreezePolicy, apply_freeze_policy, canonical_name,
                               census_table, freeze_batchnorm_stats,
                               standard_freeze_policy, parameter_census,
                               resolve_policy)
from shadowpeft.segmenter import build_model, toy_model_config


class SmallModel(nn.Module):
    def __init__(self):
        super().__init__()
        self.encoder = nn.Linear(8, 4)
        self.decoder = nn.Linear(4, 2)
        self.bn = nn.BatchNorm1d(2)


def snapshot(model):
    return {n: p.detach().clone() for n, p in model.named_parameters()}


def test_policy_rejects_overlap():
    with pytest.raises(ConfigError):
        FreezePolicy(frozenset({"encoder"}), frozenset({"encoder", "decoder"}))


def test_total_freeze_blocks_all_updates():
    torch.manual_seed(0)
    model = SmallModel()
    policy = FreezePolicy(frozenset(), frozenset({"encoder", "decoder", "bn"}))
    apply_freeze_policy(model, policy)
    assert all(not p.requires_grad for p in model.parameters())


def test_affine_census_counts():
    model = SmallModel()
    policy = FreezePolicy(frozenset({"encoder"}), frozenset({"decoder", "bn"}))
    trainable, frozen, rows = parameter_census(model, policy)
    assert trainable == 8 * 4 + 4  # one 8->4 affine map
    assert frozen == (4 * 2 + 2) + (2 + 2)
    assert trainable + frozen == sum(p.numel() for p in model.parameters())
    by_group = {r.group: r for r in rows}
    assert by_group["encoder"].trainable and by_group["encoder"].count == 36
    assert not by_group["decoder"].trainable
    assert "36" in census_table(trainable, frozen, rows)


def test_unknown_group_is_rejected():
    model = SmallModel()
    with pytest.raises(ConfigError) as exc:
        apply_freeze_policy(
            model, FreezePolicy(frozenset({"decoder2"}),
                                frozenset({"encoder", "decoder", "bn"})))
    assert "decoder2" in str(exc.value)


def test_uncovered_parameters_are_rejected():
    model = SmallModel()
    with pytest.raises(ConfigError) as exc:
        apply_freeze_policy(model, FreezePolicy(frozenset({"encoder"}),
                                                frozenset({"decoder"})))
    assert "bn" in str(exc.value)


def test_canonical_name_remaps_encoder_adapters():
    assert (canonical_name("image_encoder.blocks.3.adapter1.down.weight")
            == "image_encoder.adapters.blocks.3.adapter1.down.weight")
    assert (canonical_name("image_encoder.blocks.3.attn.qkv.weight")
            == "image_encoder.base.blocks.3.attn.qkv.weight")
    assert canonical_name("mask_decoder.mask_token.weight") == "mask_decoder.mask_token.weight"


def test_standard_policy_partitions_pipeline():
    torch.manual_seed(0)
    model = build_model(toy_model_config())
    policy = standard_freeze_policy()
    apply_freeze_policy(model, policy)
    for name, p in model.named_parameters():
        cname = canonical_name(name)
        expect = (cname.startswith("image_encoder.adapters")
                  or cname.startswith("mask_decoder")
                  or cname.startswith("prompt_generator.decoder"))
        assert p.requires_grad == expect, name


def test_resolve_policy_drops_absent_groups():
    model = build_model(toy_model_config(adapter_mha=False, adapter_ffn=False))
    resolved = resolve_policy(model, standard_freeze_policy())
    assert "image_encoder.adapters" not in resolved.trainable_groups
    assert "mask_decoder" in resolved.trainable_groups
    apply_freeze_policy(model, resolved)  # must not raise


def test_backbone_toggle():
    model = build_model(toy_model_config())
    apply_freeze_policy(model, standard_freeze_policy(freeze_backbone=False))
    assert all(p.requires_grad for p in model.prompt_generator.backbone.parameters())
    apply_freeze_policy(model, standard_freeze_policy(freeze_backbone=True))
    assert not any(p.requires_grad for p in model.prompt_generator.backbone.parameters())


def test_one_step_moves_only_trainable_groups():
    torch.manual_seed(0)
    model = build_model(toy_model_config())
    policy = standard_freeze_policy()
    apply_freeze_policy(model, policy)
    before = snapshot(model)
    opt = torch.optim.SGD([p for p in model.parameters() if p.requires_grad], lr=0.1)
    coarse, final, _ = model(torch.randn(2, 3, 64, 64))
    (coarse.mean() + final.mean()).backward()
    opt.step()
    changed = {n for n, p in model.named_parameters()
               if not torch.equal(p, before[n])}
    for name in changed:
        cname = canonical_name(name)
        assert not cname.startswith("image_encoder.base"), name
        assert not cname.startswith("prompt_encoder"), name
        assert not cname.startswith("prompt_generator.backbone"), name
    # the coarse-mask decoder definitely received gradients
    assert any(canonical_name(n).startswith("prompt_generator.decoder") for n in changed)


def test_frozen_batchnorm_keeps_running_stats():
    torch.manual_seed(0)
    model = build_model(toy_model_config())
    policy = standard_freeze_policy(freeze_backbone=True)
    apply_freeze_policy(model, policy)
    model.train()
    freeze_batchnorm_stats(model, policy)
    stats_before = {n: b.detach().clone() for n, b in model.named_buffers()
                    if "backbone" in n and ("running_" in n or "num_batches" in n)}
    assert stats_before
    model(torch.randn(2, 3, 64, 64))
    for n, b in model.named_buffers():
        if n in stats_before:
            assert torch.equal(b, stats_before[n]), n
