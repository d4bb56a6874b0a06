"""Release gate: every core guarantee, one test per criterion.

Each test prints a single ``[PASS]``/``[FAIL]`` line (visible with ``-v -s``)
and enforces its own wall-clock budget.  The end-to-end run trains the
default desk-scale model from scratch on the synthetic dataset, so the whole
module takes on the order of fifteen minutes on one CPU core.
"""

import math
import time
from contextlib import contextmanager

import numpy as np
import pytest
import torch

import hyperdit as hd
from hyperdit.backbone import DiTBlock
from hyperdit.config import PRESETS, ModelConfig, RunConfig
from hyperdit.connector import HyperConnector
from hyperdit.evaluation import class_centroids, nearest_centroid_accuracy, toy_fid
from hyperdit.flow_matching import (
    FreqWeightProfile,
    fm_loss,
    freq_fm_loss,
    interpolate,
    repa_loss,
    target_velocity,
    xpred_to_velocity,
)
from hyperdit.patching import PatchGrid
from hyperdit.rope import RotaryBasis, compute_base_patch, rope_cos_sin, rotate_pairs, unified_grid
from hyperdit.sampler import GuidedVelocity, cfg_velocity, integrate, sample
from hyperdit.trainer import Trainer, build_model, load_checkpoint, load_ema_weights, save_checkpoint
from hyperdit.vfm import FeatureFile, load_features, mock_feature_batch


@contextmanager
def criterion(name: str, budget_s: float):
    start = time.perf_counter()
    ok = False
    try:
        yield
        elapsed = time.perf_counter() - start
        if elapsed >= budget_s:
            raise AssertionError(f"{name}: {elapsed:.1f}s exceeds the {budget_s:.0f}s budget")
        ok = True
        print(f"[PASS] {name} ({elapsed:.1f}s, budget {budget_s:.0f}s)")
    finally:
        if not ok:
            print(f"[FAIL] {name}")


def _quantize(x: torch.Tensor, grid: float = 2.0**-10) -> torch.Tensor:
    return (x / grid).round() * grid


def _tiny_config(**overrides) -> ModelConfig:
    values = dict(
        img_size=16,
        patch_large=8,
        patch_small=4,
        hidden_dim=32,
        dit_blocks=2,
        num_connectors=1,
        num_heads=2,
        num_registers=4,
        vfm_dim=8,
    )
    values.update(overrides)
    config = ModelConfig(**values)
    config.validate()
    return config


def _randomize(model: torch.nn.Module, seed: int, scale: float = 0.05) -> None:
    rng = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for p in model.parameters():
            p.copy_(torch.randn(p.shape, generator=rng, dtype=p.dtype) * scale)


# ---------------------------------------------------------------------------


def test_criterion_1_sa_rope_geometry():
    with criterion("shared rotary grid geometry", budget_s=10.0):
        # Base-patch unit for a 256px image with 8/16 patches.
        assert compute_base_patch(256, 256, 8, 16) == 4

        # Exhaustive interleaving on the full 256x256 image: coarse patch
        # centers land on even base-grid indices, fine centers on odd ones,
        # so the two streams never collide on either axis.
        base = 4
        coarse = unified_grid(PatchGrid.for_image(256, 256, 16), base)
        fine = unified_grid(PatchGrid.for_image(256, 256, 8), base)
        coarse_values = {float(v) for v in coarse.flatten()}
        fine_values = {float(v) for v in fine.flatten()}
        assert coarse_values == {4.0 * i + 2.0 for i in range(16)}
        assert fine_values == {2.0 * i + 1.0 for i in range(32)}
        assert coarse_values.isdisjoint(fine_values)

        # Rotary shift invariance: the q.k dot product depends only on the
        # positional offset, checked over 1e4 random draws in float64.
        n, head_dim = 10_000, 32
        rng = torch.Generator().manual_seed(0)
        basis = RotaryBasis(head_dim)
        q = torch.randn(n, head_dim, generator=rng, dtype=torch.float64)
        k = torch.randn(n, head_dim, generator=rng, dtype=torch.float64)
        pos_q = torch.rand(n, 2, generator=rng, dtype=torch.float64) * 256
        pos_k = torch.rand(n, 2, generator=rng, dtype=torch.float64) * 256
        delta = (torch.rand(n, 2, generator=rng, dtype=torch.float64) - 0.5) * 256

        def dots(pq, pk):
            cq, sq = rope_cos_sin(pq, basis, dtype=torch.float64)
            ck, sk = rope_cos_sin(pk, basis, dtype=torch.float64)
            return (rotate_pairs(q, cq, sq) * rotate_pairs(k, ck, sk)).sum(-1)

        before = dots(pos_q, pos_k)
        after = dots(pos_q + delta, pos_k + delta)
        scale = torch.maximum(before.abs(), after.abs()).clamp_min(1e-6)
        rel = ((before - after).abs() / scale).max()
        assert float(rel) < 1e-5, f"shift invariance broke: rel err {float(rel):.3e}"


def test_criterion_2_flow_matching_algebra():
    with criterion("flow-matching algebra", budget_s=10.0):
        rng = torch.Generator().manual_seed(1)
        x0 = torch.randn(8, 3, 8, 8, generator=rng)
        eps = torch.randn(8, 3, 8, 8, generator=rng)

        # Interpolant endpoints are bitwise exact.
        assert torch.equal(interpolate(x0, eps, torch.zeros(8)), eps)
        assert torch.equal(interpolate(x0, eps, torch.ones(8)), x0)

        # x-pred -> velocity identity, bitwise on a dyadic grid where every
        # intermediate is float-exact (1 - t a power of two, tensors on a
        # 2^-10 lattice), for all t <= 0.99.
        for k in range(1, 7):
            t = torch.full((4,), 1.0 - 2.0**-k)
            assert float(t[0]) <= 0.99
            v = _quantize(torch.randn(4, 3, 8, 8, generator=rng))
            z = _quantize(torch.randn(4, 3, 8, 8, generator=rng))
            x_hat = z + (1.0 - t).view(-1, 1, 1, 1) * v
            assert torch.equal(xpred_to_velocity(x_hat, z, t), v)

        # ... and to float64 tolerance for arbitrary t <= 0.99.
        t = torch.rand(64, dtype=torch.float64, generator=rng) * 0.99
        v = torch.randn(64, 3, 8, 8, generator=rng, dtype=torch.float64)
        z = torch.randn(64, 3, 8, 8, generator=rng, dtype=torch.float64)
        x_hat = z + (1.0 - t).view(-1, 1, 1, 1) * v
        recovered = xpred_to_velocity(x_hat, z, t)
        rel = ((recovered - v).abs() / v.abs().clamp_min(1e-6)).max()
        assert float(rel) < 1e-6

        # Uniform frequency weighting equals the plain objective (Parseval)
        # on 100 independent random 8x8 inputs.
        profile = FreqWeightProfile.uniform(8, 8)
        for _ in range(100):
            x0 = torch.randn(1, 3, 8, 8, generator=rng)
            eps = torch.randn(1, 3, 8, 8, generator=rng)
            v_pred = torch.randn(1, 3, 8, 8, generator=rng)
            plain = fm_loss(v_pred, x0, eps)
            freq = freq_fm_loss(v_pred, target_velocity(x0, eps), profile)
            rel = float((plain - freq).abs() / plain.abs().clamp_min(1e-12))
            assert rel < 1e-6, f"Parseval mismatch: rel err {rel:.3e}"


def test_criterion_3_gradient_check():
    with criterion("finite-difference gradient check", budget_s=120.0):
        torch.manual_seed(0)
        config = ModelConfig()  # the default desk-scale shape
        model = build_model(config, seed=0).double()
        _randomize(model, seed=10)

        rng = torch.Generator().manual_seed(11)
        images = torch.randn(2, 3, 32, 32, generator=rng, dtype=torch.float64)
        eps = torch.randn(2, 3, 32, 32, generator=rng, dtype=torch.float64)
        t = torch.tensor([0.3, 0.7], dtype=torch.float64)
        labels = torch.tensor([0, 1])
        feats = mock_feature_batch(
            images.float(), token_count=config.num_registers, dim=config.vfm_dim, seed=0
        ).double()
        profile = FreqWeightProfile.uniform(32, 32)

        def loss_fn() -> torch.Tensor:
            z_t = interpolate(images, eps, t)
            pred, anchors = model.forward_full(z_t, t, labels)
            loss = fm_loss(pred, images, eps)
            loss = loss + 1.0 * freq_fm_loss(pred, target_velocity(images, eps), profile)
            loss = loss + 0.5 * repa_loss(anchors.registers, feats, model.repa_head)
            return loss

        model.zero_grad(set_to_none=True)
        loss_fn().backward()
        params = [(name, p) for name, p in model.named_parameters()]

        # Keep coordinates whose gradient clears the central-difference noise
        # floor (eps * loss / h ~ 1e-11): below that, the relative comparison
        # measures rounding, not correctness.
        pick = torch.Generator().manual_seed(12)
        candidates = []
        for _ in range(400):
            if len(candidates) >= 24:
                break
            pi = int(torch.randint(0, len(params), (1,), generator=pick))
            name, p = params[pi]
            ci = int(torch.randint(0, p.numel(), (1,), generator=pick))
            grad = p.grad.flatten()[ci] if p.grad is not None else torch.tensor(0.0)
            if abs(float(grad)) > 1e-5:
                candidates.append((name, p, ci, float(grad)))
        assert len(candidates) >= 20, f"only {len(candidates)} usable coordinates drawn"

        worst = 0.0
        with torch.no_grad():
            for name, p, ci, analytic in candidates[:24]:
                flat = p.flatten()
                keep = float(flat[ci])
                h = 1e-5 * max(1.0, abs(keep))
                flat[ci] = keep + h
                plus = float(loss_fn())
                flat[ci] = keep - h
                minus = float(loss_fn())
                flat[ci] = keep
                fd = (plus - minus) / (2.0 * h)
                rel = abs(analytic - fd) / max(abs(analytic), abs(fd), 1e-10)
                worst = max(worst, rel)
                assert rel < 1e-4, (
                    f"{name}[{ci}]: analytic {analytic:.10e} vs fd {fd:.10e} (rel {rel:.2e})"
                )
        print(f"  checked {len(candidates[:24])} coordinates, worst rel err {worst:.2e}")


def test_criterion_4_sampler_suite():
    with criterion("sampler order, guidance, and cost accounting", budget_s=30.0):
        rng = torch.Generator().manual_seed(2)

        # Exact on a constant field: 8 dyadic steps reach z0 + c bitwise.
        z0 = _quantize(torch.randn(4, 3, generator=rng))
        c = _quantize(torch.randn(4, 3, generator=rng))
        out = integrate(lambda z, t: c, z0, steps=8)
        assert torch.equal(out, z0 + c)

        # Exact on a field linear in t: the two-point average integrates
        # degree-1 polynomials without error.
        a = _quantize(torch.randn(4, 3, generator=rng))
        b = _quantize(torch.randn(4, 3, generator=rng))
        out = integrate(lambda z, t: a * t + b, z0, steps=8)
        assert torch.equal(out, z0 + 0.5 * a + b)

        # Second-order convergence on dz/dt = z.
        z0 = torch.tensor([0.5, 1.0, 2.0], dtype=torch.float64)
        exact = z0 * math.e
        errors, widths = [], []
        for steps in (4, 8, 16, 32, 64):
            z = integrate(lambda z, t: z, z0, steps=steps)
            errors.append(float((z - exact).abs().max()))
            widths.append(1.0 / steps)
        slope = float(np.polyfit(np.log(widths), np.log(errors), 1)[0])
        assert 1.8 <= slope <= 2.2, f"convergence slope {slope:.3f} outside [1.8, 2.2]"

        # Guidance algebra: w = 1 and out-of-interval times return the
        # conditional branch itself, not a recomputed copy.
        v_c = torch.randn(2, 3, generator=rng)
        v_u = torch.randn(2, 3, generator=rng)
        assert cfg_velocity(v_u, v_c, hd.CfgPolicy(w=1.0), t=0.5) is v_c
        gated = hd.CfgPolicy(w=2.0, t_min=0.3, t_max=0.7)
        assert cfg_velocity(v_u, v_c, gated, t=0.2) is v_c
        assert cfg_velocity(v_u, v_c, gated, t=0.8) is v_c
        expected = v_u + 2.0 * (v_c - v_u)
        assert torch.equal(cfg_velocity(v_u, v_c, gated, t=0.5), expected)

        # Forward-pass accounting: with guidance live on [0, 1], a 50-step
        # second-order run costs 2 stages x 2 branches x 50 steps.
        model = build_model(_tiny_config(), seed=3)
        policy = hd.CfgPolicy(w=2.0, t_min=0.0, t_max=1.0)
        field = GuidedVelocity(model, torch.tensor([0]), policy)
        integrate(field, torch.randn(1, 3, 16, 16, generator=rng), steps=50)
        assert field.nfe == 2 * 2 * 50, f"NFE {field.nfe} != 200"


def test_criterion_5_architecture_invariants():
    with criterion("architecture invariants", budget_s=60.0):
        rng = torch.Generator().manual_seed(4)

        # Zero-gated backbone block is a bitwise identity at initialization.
        block = DiTBlock(dim=32, num_heads=2)
        x = torch.randn(2, 12, 32, generator=rng)
        cond = torch.randn(2, 32, generator=rng)
        cos = torch.ones(12, 8)
        sin = torch.zeros(12, 8)
        assert torch.equal(block(x, cond, cos, sin), x)

        # Zero-gated connector passes fine tokens through unchanged.
        connector = HyperConnector(dim=32, num_heads=2)
        fine = torch.randn(2, 16, 32, generator=rng)
        anchor = torch.randn(2, 6, 32, generator=rng)
        q_cos, q_sin = torch.ones(16, 8), torch.zeros(16, 8)
        k_cos, k_sin = torch.ones(6, 8), torch.zeros(6, 8)
        assert torch.equal(connector(fine, anchor, cond, q_cos, q_sin, k_cos, k_sin), fine)

        # A fresh model is therefore the zero velocity field.
        config = _tiny_config()
        model = build_model(config, seed=5)
        z = torch.randn(2, 3, 16, 16, generator=rng)
        t = torch.tensor([0.25, 0.75])
        labels = torch.tensor([0, 1])
        with torch.no_grad():
            pred, anchors = model.forward_full(z, t, labels)
        assert torch.equal(pred, torch.zeros_like(z))
        for depth in anchors.anchors[1:]:
            assert torch.equal(depth, anchors.anchors[0])

        # Register identity is positional only: permuting the learned
        # register rows permutes register outputs and changes nothing else,
        # bit for bit, even with fully random weights.
        model = build_model(config, seed=6)
        _randomize(model, seed=7)
        with torch.no_grad():
            base_pred, base_anchors = model.forward_full(z, t, labels)
        perm = torch.randperm(config.num_registers, generator=torch.Generator().manual_seed(8))
        with torch.no_grad():
            model.semantics.registers.copy_(model.semantics.registers[perm])
            permuted_pred, permuted_anchors = model.forward_full(z, t, labels)
        assert torch.equal(permuted_pred, base_pred)
        assert torch.equal(permuted_anchors.registers, base_anchors.registers[:, perm])
        n_reg = config.num_registers
        for before, after in zip(base_anchors.anchors, permuted_anchors.anchors):
            assert torch.equal(after[:, n_reg:], before[:, n_reg:])

        # The mid-size reference shape (8 blocks, hidden 768, 4 connectors,
        # 16 heads at 256px) constructs with its published parameter count.
        big = PRESETS["b"]().model
        assert (big.dit_blocks, big.hidden_dim, big.num_connectors, big.num_heads) == (
            8,
            768,
            4,
            16,
        )
        big_model = build_model(big, seed=9)
        n_params = sum(p.numel() for p in big_model.parameters())
        assert n_params == 131_361_216
        assert n_params // 10**6 == 131


def test_criterion_6_end_to_end_toy_run(tmp_path):
    with criterion("end-to-end training run", budget_s=3600.0):
        run = RunConfig()
        run.train.batch = 32
        run.train.lr = 6e-4
        run.train.ema_decay = 0.99
        run.train.warmup_steps = 100
        run.train.epochs = 94
        run.train.max_steps = 3000

        train_set = hd.generate_synthetic_dataset(per_class=256, seed=0)
        held_out = hd.generate_synthetic_dataset(per_class=128, seed=1)
        provider = hd.MockFeatureProvider(
            token_count=run.model.num_registers, dim=run.model.vfm_dim, seed=0
        )

        trainer = Trainer(run, train_set, provider)
        history = trainer.train()
        assert trainer.state.step <= 20_000

        # Smoothed loss decreases monotonically across 1k-step windows.
        losses = [h["loss"] for h in history]
        windows = [sum(losses[i : i + 1000]) / 1000 for i in range(0, 3000, 1000)]
        assert all(a > b for a, b in zip(windows, windows[1:])), f"windows {windows}"

        sampler = hd.SamplerConfig(steps=25)
        policy = hd.CfgPolicy(w=1.5)
        labels = torch.arange(512) % run.model.num_classes

        def draw(model):
            rng = torch.Generator().manual_seed(5)
            chunks = []
            for lo in range(0, 512, 256):
                chunks.append(sample(model, labels[lo : lo + 256], policy, sampler, rng=rng).images)
            return torch.cat(chunks)

        untrained = draw(build_model(run.model, seed=123))
        fid_untrained = toy_fid(untrained, held_out.images, seed=0)

        trained = trainer.state.model
        load_ema_weights(trained, trainer.state.ema)
        generated = draw(trained)
        fid_trained = toy_fid(generated, held_out.images, seed=0)

        assert fid_trained < fid_untrained
        ratio = fid_untrained / max(fid_trained, 1e-12)
        assert ratio >= 5.0, (
            f"toy-FID only improved {ratio:.2f}x "
            f"({fid_untrained:.4f} -> {fid_trained:.4f})"
        )

        centroids = class_centroids(held_out.images, held_out.labels, held_out.num_classes)
        accuracy = nearest_centroid_accuracy(generated, labels, centroids)
        assert accuracy >= 0.6, f"class-conditional accuracy {accuracy:.3f} < 0.6"
        print(
            f"  loss windows {['%.3f' % w for w in windows]}, "
            f"toy-FID {fid_untrained:.4f} -> {fid_trained:.4f} ({ratio:.0f}x), "
            f"accuracy {accuracy:.3f}"
        )


def test_criterion_7_persistence(tmp_path):
    with criterion("persistence and replay", budget_s=120.0):
        run = RunConfig()
        run.model = _tiny_config()
        run.train.batch = 4
        run.train.epochs = 1
        run.train.max_steps = 6
        run.train.warmup_steps = 2
        run.train.ema_decay = 0.9
        dataset = hd.generate_synthetic_dataset(per_class=4, height=16, width=16, seed=2)
        provider = hd.MockFeatureProvider(
            token_count=run.model.num_registers, dim=run.model.vfm_dim, seed=0
        )

        # Straight-through run: 6 steps.
        straight = Trainer(run, dataset, provider)
        straight.train()

        # Interrupted run: 3 steps, checkpoint, reload, 3 more.
        part = hd.config.clone(run)
        part.train.max_steps = 3
        interrupted = Trainer(part, dataset, provider)
        interrupted.train()
        ckpt = tmp_path / "mid.ckpt"
        save_checkpoint(str(ckpt), interrupted.state)

        resumed_run = hd.config.clone(run)
        state = load_checkpoint(str(ckpt), resumed_run)
        resumed = Trainer(resumed_run, dataset, provider, state=state)
        resumed.train()

        for (name, a), (_, b) in zip(
            straight.state.model.named_parameters(), resumed.state.model.named_parameters()
        ):
            assert torch.equal(a, b), f"resume diverged at {name}"
        for name in straight.state.ema:
            assert torch.equal(straight.state.ema[name], resumed.state.ema[name])

        # Save -> load -> re-save is byte-identical.
        final = tmp_path / "final.ckpt"
        save_checkpoint(str(final), straight.state)
        reloaded = load_checkpoint(str(final), hd.config.clone(run))
        again = tmp_path / "again.ckpt"
        save_checkpoint(str(again), reloaded)
        assert final.read_bytes() == again.read_bytes()

        # A reloaded model replays the identical sample stream.
        sampler = hd.SamplerConfig(steps=4)
        labels = torch.arange(4) % 4
        first = sample(
            straight.state.model, labels, hd.CfgPolicy(w=2.0), sampler,
            rng=torch.Generator().manual_seed(6),
        ).images
        second = sample(
            reloaded.model, labels, hd.CfgPolicy(w=2.0), sampler,
            rng=torch.Generator().manual_seed(6),
        ).images
        assert torch.equal(first, second)

        # Feature files survive a round trip byte for byte.
        rng = torch.Generator().manual_seed(7)
        file = FeatureFile(token_count=4, dim=8)
        for i in range(5):
            file.add(f"img_{i:03d}", torch.randn(4, 8, generator=rng))
        payload = file.to_bytes()
        assert load_features(payload).to_bytes() == payload
