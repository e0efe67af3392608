"""End-to-end acceptance checks for the shadow-detection toolkit.

Each test covers one acceptance criterion and prints a single PASS line;
a failed assertion marks the criterion failed.
"""

import math
import os
import time
from dataclasses import replace

import numpy as np
import torch

from shadowpeft.adapters import Adapter, AdapterConfig, AdaptedTransformerLayer
from shadowpeft.config import RunConfig, validate_config
from shadowpeft.data import synthetic_samples
from shadowpeft.freeze import (apply_freeze_policy, canonical_name,
                               standard_freeze_policy, parameter_census)
from shadowpeft.losses import FocalParams, focal_loss
from shadowpeft.metrics import ber_compute
from shadowpeft.sampling import grid_sample, topk_sample
from shadowpeft.segmenter import build_model, full_model_config
from shadowpeft.trainer import run_ablation, train
from shadowpeft.trainer import component_analysis_cells, grid_size_cells

from test_adapters import gelu_exact, oracle_adapter
from test_losses_metrics import oracle_ber
from test_sampling import as_tuples, block_starts, oracle_grid, oracle_topk


def _ok(name):
    print(f"PASS: {name}")


def toy_cfg(tmp_path, **overrides):
    base = dict(model="toy", batch_size=4, epochs=2, seed=0, augment=False,
                run_dir=str(tmp_path / "run"))
    base.update(overrides)
    return validate_config(replace(RunConfig(), **base), explicit=set(base))


def test_point_samplers_match_brute_force_oracles():
    start = time.time()
    rng = np.random.default_rng(0)
    combos = [(g, k) for g in (2, 4, 8, 16) for k in (1, 2)]
    for i in range(200):
        g, k = combos[i % len(combos)]
        lo = max(8, 2 * g)  # blocks must be able to hold k picks
        h = int(rng.integers(lo, 65))
        w = int(rng.integers(lo, 65))
        mask = rng.random((h, w))
        if rng.random() < 0.3:  # exercise tie-breaking
            mask = np.round(mask, 1)
        assert as_tuples(grid_sample(mask, g, k, 0.5)) == oracle_grid(mask, g, k, 0.5)
        n = int(rng.integers(1, 9))
        assert as_tuples(topk_sample(mask, n, n)) == oracle_topk(mask, n, n)
    elapsed = time.time() - start
    assert elapsed < 30.0, f"oracle suite took {elapsed:.1f}s"
    _ok("point samplers match brute-force oracles (200 random masks)")


def test_grid_sampler_coverage_invariant():
    rng = np.random.default_rng(1)
    for g, k in [(2, 1), (4, 2), (8, 1), (16, 1)]:
        h = int(rng.integers(2 * g, 65))
        w = int(rng.integers(2 * g, 65))
        mask = rng.random((h, w))
        points = grid_sample(mask, g, k, 0.5)
        assert len(points) == g * g * k
        rs, cs = block_starts(h, g), block_starts(w, g)
        counts = np.zeros((g, g), dtype=int)
        for p in points:
            bi = next(i for i in range(g) if rs[i] <= p.y < rs[i + 1])
            bj = next(j for j in range(g) if cs[j] <= p.x < cs[j + 1])
            counts[bi, bj] += 1
            assert p.label == int(p.score >= 0.5)
            assert p.score == mask[p.y, p.x]
        assert (counts == k).all()
    _ok("grid sampler emits exactly k points per block with consistent labels")


def test_ber_matches_counting_oracle():
    gt = np.zeros((4, 4), dtype=np.uint8)
    gt[0, :2] = 1
    pred = np.zeros((4, 4), dtype=np.uint8)
    pred[0, 0] = 1
    assert ber_compute(pred, gt).ber == 25.0
    rng = np.random.default_rng(2)
    for _ in range(100):
        gt = (rng.random((32, 32)) > rng.uniform(0.1, 0.9)).astype(np.uint8)
        pred = (rng.random((32, 32)) > 0.5).astype(np.uint8)
        rep = ber_compute(pred, gt)
        assert abs(rep.ber - oracle_ber(pred, gt)) < 1e-12
    _ok("balanced error rate matches the counting oracle (100 random pairs)")


def test_focal_loss_closed_forms_and_gradient():
    params = FocalParams(8.0 / 9.0, 2.0)
    pos = focal_loss(torch.tensor([0.5]), torch.tensor([1.0]), params)
    neg = focal_loss(torch.tensor([0.5]), torch.tensor([0.0]), params)
    assert abs(pos.item() - 0.154033) < 1e-5
    assert abs(neg.item() - 0.019254) < 1e-5

    torch.manual_seed(0)
    pred = torch.rand(32).clamp(0.01, 0.99).double()
    target = (torch.rand(32) > 0.5).double()
    half_bce = focal_loss(pred, target, FocalParams(0.5, 0.0))
    bce = torch.nn.functional.binary_cross_entropy(pred, target)
    assert abs(half_bce.item() - 0.5 * bce.item()) < 1e-6

    pred = torch.rand(16, dtype=torch.float64).clamp(0.05, 0.95).requires_grad_(True)
    target = (torch.rand(16) > 0.4).double()
    focal_loss(pred, target, params).backward()
    eps = 1e-5
    for i in range(16):
        with torch.no_grad():
            hi = pred.detach().clone(); hi[i] += eps
            lo = pred.detach().clone(); lo[i] -= eps
            fd = (focal_loss(hi, target, params)
                  - focal_loss(lo, target, params)).item() / (2 * eps)
        assert abs(pred.grad[i].item() - fd) / max(abs(fd), 1e-12) < 1e-3
    _ok("focal loss matches closed forms, halves BCE, and passes gradient check")


def test_adapter_math_is_correct():
    torch.manual_seed(0)
    adapter = Adapter(AdapterConfig(channels=8, ratio=0.5)).double()
    with torch.no_grad():
        for p in adapter.parameters():
            p.uniform_(-0.5, 0.5)
    x = torch.randn(4, 8, dtype=torch.float64)
    expected = oracle_adapter(
        x.numpy(), adapter.down.weight.detach().numpy(),
        adapter.down.bias.detach().numpy(), adapter.up.weight.detach().numpy(),
        adapter.up.bias.detach().numpy())
    assert np.abs(adapter(x).detach().numpy() - expected).max() < 1e-6

    w = torch.randn(4, 8, dtype=torch.float64)
    (adapter(x) * w).sum().backward()
    eps = 1e-4
    for p in adapter.parameters():
        flat, gflat = p.detach().view(-1), p.grad.view(-1)
        for i in range(min(flat.numel(), 6)):
            with torch.no_grad():
                orig = flat[i].item()
                flat[i] = orig + eps
                hi = (adapter(x) * w).sum().item()
                flat[i] = orig - eps
                lo = (adapter(x) * w).sum().item()
                flat[i] = orig
            fd = (hi - lo) / (2 * eps)
            assert abs(gflat[i].item() - fd) / max(abs(fd), 1e-8) < 1e-3

    # zero up-projection reproduces the unadapted attention sub-block exactly
    torch.manual_seed(1)
    dim = 16
    adapted = AdaptedTransformerLayer(dim, 2, 2.0, AdapterConfig(dim),
                                      use_adapter_ffn=False)
    plain = AdaptedTransformerLayer(dim, 2, 2.0, AdapterConfig(dim),
                                    use_adapter_mha=False, use_adapter_ffn=False)
    plain.load_state_dict(adapted.state_dict(), strict=False)
    with torch.no_grad():
        adapted.adapter1.up.weight.zero_()
        adapted.adapter1.up.bias.zero_()
    xt = torch.randn(2, 6, dim)
    assert torch.equal(adapted(xt), plain(xt))
    _ok("adapters match the loop oracle, pass gradient check, and are exact at zero")


def test_freeze_policy_soundness(tmp_path):
    start = time.time()
    torch.manual_seed(0)
    cfg = toy_cfg(tmp_path)
    model = build_model(cfg.model_config(), cfg.sampling_config())
    policy = standard_freeze_policy(freeze_backbone=True)
    apply_freeze_policy(model, policy)
    before = {n: p.detach().clone() for n, p in model.named_parameters()}
    opt = torch.optim.Adam([p for p in model.parameters() if p.requires_grad],
                           lr=1e-3)
    samples = synthetic_samples(4, size=64, seed=1)
    images = torch.stack([torch.from_numpy(s.image).permute(2, 0, 1)
                          for s in samples])
    targets = torch.stack([torch.from_numpy(s.gt_mask).float() for s in samples])
    for _ in range(10):
        opt.zero_grad()
        coarse, final, _ = model(images)
        loss = (focal_loss(coarse, targets, cfg.focal_params())
                + focal_loss(final, targets, cfg.focal_params()))
        loss.backward()
        opt.step()
    changed_groups = set()
    for name, p in model.named_parameters():
        cname = canonical_name(name)
        frozen = (cname.startswith("image_encoder.base")
                  or cname.startswith("prompt_encoder")
                  or cname.startswith("prompt_generator.backbone"))
        if frozen:
            assert torch.equal(p, before[name]), f"frozen {name} moved"
        elif not torch.equal(p, before[name]):
            for g in ("image_encoder.adapters", "mask_decoder",
                      "prompt_generator.decoder"):
                if cname.startswith(g):
                    changed_groups.add(g)
    assert changed_groups == {"image_encoder.adapters", "mask_decoder",
                              "prompt_generator.decoder"}
    elapsed = time.time() - start
    assert elapsed < 120.0, f"freeze soundness took {elapsed:.1f}s"
    _ok("10 optimizer steps leave frozen groups bitwise unchanged and move all "
        "trainable groups")


def test_overfit_smoke(tmp_path):
    start = time.time()
    cfg = toy_cfg(tmp_path, batch_size=8, epochs=200, learning_rate=1e-2)
    samples = synthetic_samples(8, size=64, seed=1)
    result = train(cfg, samples=samples, max_steps=200, eval_every=50)
    ber = result.history[-1]["train_ber"]
    elapsed = time.time() - start
    assert elapsed < 600.0, f"overfit smoke took {elapsed:.1f}s"
    assert ber < 5.0, f"training BER {ber:.2f} after 200 steps"
    _ok(f"toy pipeline overfits 8 synthetic images to BER {ber:.2f} < 5 "
        f"in {elapsed:.0f}s")


def test_training_determinism(tmp_path):
    samples = synthetic_samples(6, size=64, seed=2)
    blobs = []
    for name in ("a", "b"):
        cfg = toy_cfg(tmp_path, epochs=3, augment=True,
                      run_dir=str(tmp_path / name))
        train(cfg, samples=samples)
        with open(os.path.join(cfg.run_dir, "metrics.csv"), "rb") as fh:
            blobs.append(fh.read())
    assert blobs[0] == blobs[1]
    _ok("two runs of the same config produce bit-identical metrics.csv")


def test_parameter_census_within_band():
    target = 11_564_121
    model = build_model(full_model_config())
    trainable, frozen, rows = parameter_census(model, standard_freeze_policy(True))
    ratio = trainable / target
    assert abs(trainable - target) / target <= 0.10, (
        f"trainable {trainable:,} vs target {target:,}")
    by_group = {r.group: r.count for r in rows}
    assert by_group["image_encoder.adapters"] == 7_100_928
    _ok(f"full-scale trainable parameter count {trainable:,} is within 10% of "
        f"{target:,} (ratio {ratio:.3f})")


def test_ablation_harness(tmp_path):
    cfg = toy_cfg(tmp_path, epochs=1, batch_size=4)
    samples = synthetic_samples(4, size=64, seed=3)
    comp = run_ablation(component_analysis_cells(), cfg, samples=samples,
                        max_steps=1)
    grid = run_ablation(grid_size_cells(), cfg, samples=samples, max_steps=1)
    assert [r["name"] for r in comp] == [
        "baseline", "point", "point+mha", "point+mha+ffn", "point+mha+ffn+freeze"]
    assert [r["name"] for r in grid] == ["grid12", "grid16", "grid24", "grid32"]
    for r in comp + grid:
        assert math.isfinite(r["ber"]) and 0.0 <= r["ber"] <= 100.0
    _ok("component and grid-size ablation matrices run end to end with finite BER")
