"""Acceptance checks: one test per release criterion.

Each test is self-contained and asserts the documented tolerance; the
end-to-end toy run (criterion 11) shares one trained pipeline across its
assertions via a module-scoped fixture.
"""

import math
import time
from pathlib import Path

import numpy as np
import pytest
import torch

from hsidiff.augment import lfue
from hsidiff.cli import main
from hsidiff.cube import (
    SplitSpec,
    extract_patch,
    generate_toy_cube,
    load_captions,
    normalize,
    sample_issd_split,
    sbr_expansion_plan,
)
from hsidiff.denoiser import Denoiser, DenoiserConfig
from hsidiff.evaluation import (
    ClassifierConfig,
    ConfusionMatrix,
    export_attention,
    point_fidelity,
    reference_classifier,
    score,
)
from hsidiff.nnutil import MultiHeadAttention
from hsidiff.schedule import cfg_combine, ddim_step, ddim_timesteps, make_linear_schedule, q_sample
from hsidiff.synthesis import GenerationRequest, LdmArtifacts, expand_dataset, generate_patches
from hsidiff.text import build_vocab, tokenize
from hsidiff.training import TrainConfig, build_model, ema_update, supervised_loss, train_ldm
from hsidiff.vae import Vae, VaeConfig, train_vae, vae_loss

# ---------------------------------------------------------------------------
# Toy-run settings (criterion 11).  The scenario is fixed: 3 classes, 8 bands,
# 32x32 cube, per-class train counts (3, 8, 15), 200 VAE epochs, 300 LDM
# epochs, guidance 0.7.  The remaining knobs below were tuned for a one-core
# sandbox; the whole run must stay under the 15-minute budget.
# ---------------------------------------------------------------------------
TOY_SIDE = 5
TOY_VAE = VaeConfig(in_channels=8, hidden=24, depth=2, lambda_kl=1e-4,
                    lambda_adv=0.0, lr=2e-3, epochs=200, batch_size=64, seed=0)
TOY_LDM = TrainConfig(epochs=300, batch_size=4, lr=1e-3, ema_alpha=0.99,
                      cond_drop_prob=0.1, total_steps=500, seed=0)
TOY_DENOISER = DenoiserConfig(d_emb=48, blocks=3, heads=4, patch_side=TOY_SIDE,
                              total_steps=500)
TOY_TEXT_LAYERS = 2
TOY_UNLABELED = 64
TOY_OMEGA = 0.7
TOY_SAMPLE_STEPS = 200
TOY_EVAL_COUNT = 16
TOY_LAMBDA = 1.0
TOY_CLASSIFIER = dict(hidden=8, epochs=40, lr=1e-3)
TOY_CLASSIFIER_SEEDS = (0, 1, 2)
TOY_BUDGET_SECONDS = 900.0


def test_c01_alpha_bar_matches_brute_force_product():
    start = time.monotonic()
    sched = make_linear_schedule(steps=500, beta_min=1e-4, beta_max=0.02)
    running = 1.0
    for t in range(1, 501):
        running *= 1.0 - sched.beta_at(t)
        assert abs(sched.alpha_bar_at(t) - running) <= 1e-12
    diffs = np.diff(sched.alpha_bar)
    assert (diffs < 0).all()
    assert time.monotonic() - start < 1.0


def test_c02_forward_process_moments_within_three_standard_errors():
    start = time.monotonic()
    sched = make_linear_schedule()
    n = 100_000
    z0 = 1.3
    rng = np.random.default_rng(7)
    for t in (1, 250, 500):
        abar = sched.alpha_bar_at(t)
        eps = rng.standard_normal(n)
        draws = q_sample(np.full(n, z0), t, eps, sched)
        exp_mean = math.sqrt(abar) * z0
        exp_var = 1.0 - abar
        se_mean = math.sqrt(exp_var) / math.sqrt(n)
        se_var = exp_var * math.sqrt(2.0 / (n - 1))
        assert abs(draws.mean() - exp_mean) <= 3 * se_mean
        assert abs(draws.var() - exp_var) <= 3 * se_var
    assert time.monotonic() - start < 10.0


def test_c03_perfect_oracle_ddim_recovers_planted_latent():
    start = time.monotonic()
    sched = make_linear_schedule()
    gen = torch.Generator().manual_seed(11)
    z0 = torch.randn(1, 4, 3, 3, generator=gen, dtype=torch.float64)
    z = torch.randn(1, 4, 3, 3, generator=gen, dtype=torch.float64)
    for t, t_prev in ddim_timesteps(500, 50):
        abar = sched.alpha_bar_at(t)
        eps_bar = (z - math.sqrt(abar) * z0) / math.sqrt(1.0 - abar)
        z = ddim_step(z, t, t_prev, eps_bar, sched)
    assert float((z - z0).abs().max()) <= 1e-5
    assert time.monotonic() - start < 1.0


def test_c04_guidance_identities():
    gen = torch.Generator().manual_seed(3)
    eps_c = torch.randn(2, 4, 5, 5, generator=gen, dtype=torch.float64)
    eps_u = torch.randn(2, 4, 5, 5, generator=gen, dtype=torch.float64)
    assert torch.equal(cfg_combine(eps_c, eps_u, 0.0), eps_c)
    for omega in (0.0, 0.3, 0.7, 1.5, 4.0):
        assert torch.equal(cfg_combine(eps_c, eps_c, omega), eps_c)
        combined = cfg_combine(eps_c, eps_u, omega)
        lhs = float((combined - eps_u).norm())
        rhs = (1.0 + omega) * float((eps_c - eps_u).norm())
        assert abs(lhs - rhs) <= 1e-10


def test_c05_latent_feature_uncertainty_identities():
    gen = torch.Generator().manual_seed(5)
    batch = torch.randn(6, 4, 3, 3, generator=gen)
    zero = torch.zeros(6, 4)
    assert float((lfue(batch, zero, zero) - batch).abs().max()) <= 1e-6

    constant = torch.stack([torch.full((1, 2, 2), 2.0), torch.full((1, 2, 2), 3.0)])
    shifted = lfue(constant, torch.ones(2, 1), torch.zeros(2, 1))
    assert torch.equal(shifted, constant + 0.5)


def test_c06_ema_closed_form_and_bitwise_replay():
    ema = torch.zeros(50, dtype=torch.float64)
    target = torch.ones(50, dtype=torch.float64)
    for _ in range(100):
        ema = ema_update(ema, target, 0.99)
    assert float((ema - (1.0 - 0.99**100)).abs().max()) <= 1e-9

    def run() -> list[torch.Tensor]:
        gen = torch.Generator().manual_seed(17)
        state = torch.zeros(8, 3)
        trace = []
        for _ in range(25):
            base = torch.randn(8, 3, generator=gen)
            state = ema_update(state, base, 0.99)
            trace.append(state.clone())
        return trace

    first, second = run(), run()
    assert all(torch.equal(a, b) for a, b in zip(first, second))


def test_c07_losses_match_central_finite_differences():
    start = time.monotonic()
    rng = np.random.default_rng(0)

    def check(all_params: list[torch.nn.Parameter], compute, samples: int):
        loss = compute()
        loss.backward()
        params = [p for p in all_params if p.grad is not None]
        grads = [p.grad.clone() for p in params]
        checked = 0
        while checked < samples:
            i = int(rng.integers(len(params)))
            p = params[i]
            idx = tuple(int(rng.integers(s)) for s in p.shape)
            analytic = float(grads[i][idx])
            h = 1e-6
            with torch.no_grad():
                p[idx] += h
                plus = float(compute())
                p[idx] -= 2 * h
                minus = float(compute())
                p[idx] += h
            numeric = (plus - minus) / (2 * h)
            scale = max(abs(analytic), abs(numeric), 1e-8)
            assert abs(numeric - analytic) / scale < 1e-3
            checked += 1

    denoiser_cfg = DenoiserConfig(d_emb=8, blocks=2, heads=2, patch_side=3, total_steps=20)
    model = build_model(12, denoiser_cfg, layers=1, seed=0, dtype=torch.float64)
    gen = torch.Generator().manual_seed(2)
    z0 = torch.randn(2, 4, 3, 3, generator=gen, dtype=torch.float64)
    eps = torch.randn(2, 4, 3, 3, generator=gen, dtype=torch.float64)
    ids = torch.tensor([[1, 4, 5, 2] + [0] * 73, [1, 6, 2] + [0] * 74])
    lengths = torch.tensor([4, 3])
    t = torch.tensor([3, 17])

    def diffusion_loss() -> torch.Tensor:
        ctx = model.text(ids, lengths)
        return supervised_loss(z0, ctx, t, eps, model, make_linear_schedule(steps=20))

    check([p for p in model.parameters() if p.requires_grad], diffusion_loss, 20)

    config = VaeConfig(in_channels=6, hidden=4, depth=2, lambda_kl=1e-4, lambda_adv=0.0)
    vae = Vae(config, dtype=torch.float64)
    patch = torch.rand(2, 6, 3, 3, generator=gen, dtype=torch.float64)
    vae_eps = torch.randn(2, 4, 3, 3, generator=gen, dtype=torch.float64)

    def reconstruction_loss() -> torch.Tensor:
        recon, post = vae(patch, vae_eps)
        return vae_loss(patch, recon, post, None, config.lambda_kl, 0.0)

    check(list(vae.parameters()), reconstruction_loss, 20)
    assert time.monotonic() - start < 30.0


def test_c08_attention_rows_sum_to_one_and_export_count(tmp_path):
    gen = torch.Generator().manual_seed(9)
    self_attn = MultiHeadAttention(16, 4, gen)
    cross_attn = MultiHeadAttention(16, 4, gen, scale=0.25)
    q = torch.randn(3, 10, 16, generator=gen)
    kv = torch.randn(3, 7, 16, generator=gen)
    for attn, keys in ((self_attn, q), (cross_attn, kv)):
        with torch.no_grad():
            _, weights = attn(q, keys, key_lengths=torch.tensor([keys.shape[1]] * 3))
        assert float((weights.sum(dim=-1) - 1.0).abs().max()) <= 1e-6

    net = Denoiser(DenoiserConfig(d_emb=8, blocks=2, heads=2, patch_side=4, total_steps=10))
    z = torch.randn(2, 4, 4, 4, generator=gen)
    ctx = torch.randn(2, 77, 8, generator=gen)
    with torch.no_grad():
        _, maps = net(z, 5, ctx)
    assert len(maps) == 2
    for amap in maps:
        assert float((amap.weights.sum(dim=-1) - 1.0).abs().max()) <= 1e-6

    _, corpus = generate_toy_cube(classes=2, bands=5, height=12, width=12, seed=0)
    vocab = build_vocab(corpus)
    caption = corpus.entries[1][0]
    tokens = tokenize(caption, vocab)
    paths = export_attention(maps, tokens, vocab, tmp_path)
    rasters = [p for p in paths if p.suffix == ".pgm"]
    assert len(rasters) == tokens.real_length - 2


def test_c09_expansion_plan_worked_example():
    assert sbr_expansion_plan([3, 12, 22], 0.4) == [9, 12, 22]


def test_c10_metric_oracles():
    truth = [1] * 5 + [2] * 5
    pred = [1, 1, 1, 1, 2, 2, 2, 2, 2, 1]
    scores = score(ConfusionMatrix.from_pairs(truth, pred, 2))
    assert scores.kappa == 0.6

    rng = np.random.default_rng(123)
    truth = rng.integers(1, 5, size=1000)
    pred = rng.integers(1, 5, size=1000)
    scores = score(ConfusionMatrix.from_pairs(truth.tolist(), pred.tolist(), 4))
    oa = float((truth == pred).mean())
    per_class = [float((pred[truth == c] == c).mean()) for c in range(1, 5)]
    po = oa
    pe = sum(
        float((truth == c).mean()) * float((pred == c).mean()) for c in range(1, 5)
    )
    assert scores.oa == pytest.approx(oa, abs=1e-12)
    assert scores.aa == pytest.approx(float(np.mean(per_class)), abs=1e-12)
    assert scores.kappa == pytest.approx((po - pe) / (1 - pe), abs=1e-12)


@pytest.fixture(scope="module")
def toy_run():
    """Train the full pipeline once at toy scale and collect every statistic
    the end-to-end criterion needs."""
    start = time.monotonic()
    cube, corpus = generate_toy_cube(classes=3, bands=8, height=32, width=32, seed=0)
    cube = normalize(cube)
    split = sample_issd_split(
        cube,
        SplitSpec(per_class_train=(3, 8, 15), unlabeled_pool_size=TOY_UNLABELED, seed=0),
        side=TOY_SIDE,
        corpus=corpus,
    )
    vae_patches = np.stack(
        [
            extract_patch(cube, r, c, TOY_SIDE).pixels
            for r in range(0, cube.height, 2)
            for c in range(0, cube.width, 2)
        ]
    )
    vae_result = train_vae(vae_patches, TOY_VAE)
    ldm_result = train_ldm(
        split.train, corpus, split.unlabeled, vae_result.vae,
        TOY_LDM, TOY_DENOISER, text_layers=TOY_TEXT_LAYERS,
    )
    artifacts = LdmArtifacts(
        ema_model=ldm_result.ema_model, vocab=ldm_result.vocab, sched=ldm_result.sched,
        latent_shift=ldm_result.latent_shift, latent_scale=ldm_result.latent_scale,
    )

    real_by_class: dict[int, list] = {}
    for patch in split.train + split.test:
        real_by_class.setdefault(patch.center_label, []).append(patch)
    generated_by_class = {}
    for cls in sorted(corpus.entries):
        seed = int(np.random.SeedSequence([0, 9000 + cls]).generate_state(1)[0])
        request = GenerationRequest(
            caption=corpus.entries[cls][0], count=TOY_EVAL_COUNT,
            omega=TOY_OMEGA, steps=TOY_SAMPLE_STEPS, seed=seed,
        )
        result = generate_patches(request, artifacts, vae_result.vae, class_id=cls)
        generated_by_class[cls] = [sample.patch for sample in result.patches]

    records = expand_dataset(
        split.train, TOY_LAMBDA, TOY_OMEGA, artifacts, vae_result.vae, corpus,
        steps=TOY_SAMPLE_STEPS, seed=0,
    )
    baseline_aa, expanded_aa = [], []
    for seed in TOY_CLASSIFIER_SEEDS:
        classifier_cfg = ClassifierConfig(seed=seed, **TOY_CLASSIFIER)
        baseline = reference_classifier(split.train, split.test, classifier_cfg)
        expanded = reference_classifier(
            [record.patch for record in records], split.test, classifier_cfg
        )
        baseline_aa.append(score(baseline).aa)
        expanded_aa.append(score(expanded).aa)

    return {
        "elapsed": time.monotonic() - start,
        "real": real_by_class,
        "generated": generated_by_class,
        "baseline_aa": float(np.mean(baseline_aa)),
        "expanded_aa": float(np.mean(expanded_aa)),
        "synthetic_added": sum(1 for record in records if record.synthetic),
    }


def test_c11_toy_pipeline_end_to_end(toy_run):
    fidelity = point_fidelity(toy_run["real"], toy_run["generated"])
    for cls, (best, _) in sorted(fidelity.items()):
        assert best >= 0.9, f"class {cls} best cosine {best:.4f}"

    for cls, real_patches in sorted(toy_run["real"].items()):
        real_mean = np.stack([p.center_spectrum() for p in real_patches]).mean(axis=0)
        gen_mean = np.stack(
            [p.center_spectrum() for p in toy_run["generated"][cls]]
        ).mean(axis=0)
        distance = float(np.abs(real_mean - gen_mean).max())
        assert distance <= 0.15, f"class {cls} mean distance {distance:.4f}"

    assert toy_run["synthetic_added"] > 0
    assert toy_run["expanded_aa"] >= toy_run["baseline_aa"], (
        f"expanded AA {toy_run['expanded_aa']:.4f} "
        f"vs baseline {toy_run['baseline_aa']:.4f}"
    )
    assert toy_run["elapsed"] <= TOY_BUDGET_SECONDS


def test_c12_commands_rerun_byte_identical(tmp_path):
    def run_pipeline(work: Path) -> dict[str, bytes]:
        work.mkdir(exist_ok=True)
        ini = work / "run.ini"
        ini.write_text(
            "\n".join(
                [
                    "[paths]",
                    f"cube = {work / 'cube.hsc1'}",
                    f"captions = {work / 'captions.jsonl'}",
                    f"out_dir = {work}",
                    "[vae]",
                    "epochs = 30", "lambda_adv = 0.0", "hidden = 8", "lr = 3e-3",
                    "[ldm]",
                    "total_steps = 20", "d_emb = 8", "blocks = 1", "heads = 2",
                    "epochs = 8", "batch_size = 8", "text_layers = 1",
                    "[sample]",
                    "omega = 0.5", "steps = 5", "lam = 1.0",
                    "[split]",
                    "per_class_train = 2,3", "unlabeled_size = 8", "side = 5",
                    "[eval]",
                    "classifier_epochs = 25", "classifier_hidden = 8",
                    "classifier_lr = 5e-3", "per_class_samples = 2", "seeds = 0,1",
                    "[run]",
                    "seed = 0",
                ]
            )
            + "\n"
        )
        base = ["--config", str(ini)]
        assert main(base + [
            "gen-toy", "--classes", "2", "--bands", "5", "--height", "16", "--width", "16",
        ]) == 0
        caption = load_captions(work / "captions.jsonl").entries[1][0]
        commands = [
            ["train-vae"],
            ["train-ldm"],
            ["sample", "--caption", caption, "--count", "2"],
            ["expand-eval"],
            ["attn-export", "--caption", caption, "--step", "3"],
            ["sweep-omega", "--omegas", "0.0,0.5"],
        ]
        for command in commands:
            assert main(base + command) == 0, command
        artifacts = {}
        for path in sorted(work.rglob("*")):
            if path.is_file() and path != ini:
                artifacts[str(path.relative_to(work))] = path.read_bytes()
        return artifacts

    first = run_pipeline(tmp_path / "a")
    second = run_pipeline(tmp_path / "b")
    assert first.keys() == second.keys()
    for name in first:
        assert first[name] == second[name], f"{name} differs between reruns"
