"""Command-line pipeline driver.

Subcommands: gen-toy, train-vae, train-ldm, sample, expand-eval, attn-export,
sweep-omega.  Global flags --config/--seed/--out; artifacts are deterministic
functions of (config, seed) — no timestamps, sorted JSON keys, repr floats.
Exit codes: 0 success, 2 argument/validation error, 3 I/O or format error,
4 training divergence.
"""

from __future__ import annotations

import argparse
import csv
import sys
from pathlib import Path

import numpy as np
import torch

from . import checkpoint as ckpt
from .config import RunConfig, load_config, save_config
from .cube import (
    CaptionCorpus,
    Patch,
    SplitSpec,
    extract_patch,
    generate_toy_cube,
    load_captions,
    load_cube,
    normalize,
    sample_issd_split,
    save_captions,
    save_cube,
)
from .denoiser import DenoiserConfig
from .errors import (
    ArgumentError,
    FormatError,
    HsidiffError,
    NumericDomainError,
    StateError,
    TrainingDivergedError,
    ValidationError,
)
from .evaluation import (
    ClassifierConfig,
    export_attention,
    pca_2d,
    point_fidelity,
    reference_classifier,
    score,
    spectral_stats,
)
from .schedule import make_linear_schedule, schedule_to_csv
from .synthesis import (
    GenerationRequest,
    LdmArtifacts,
    SyntheticDataset,
    expand_dataset,
    generate_patches,
    save_patch_archive,
)
from .text import build_vocab, load_vocab, save_vocab, tokenize
from .training import TrainConfig, train_ldm
from .vae import VaeConfig, train_vae

EXIT_OK = 0
EXIT_ARGS = 2
EXIT_IO = 3
EXIT_DIVERGED = 4


def _resolve_config(args: argparse.Namespace) -> RunConfig:
    config = load_config(args.config) if args.config else RunConfig()
    if args.seed is not None:
        config.seed = args.seed
    if args.out is not None:
        config.paths.out_dir = args.out
    return config


def _out_dir(config: RunConfig) -> Path:
    out = Path(config.paths.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_history_csv(history: list[dict[str, float]], path: Path) -> None:
    if not history:
        return
    keys = list(history[0].keys())
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(keys)
        for row in history:
            writer.writerow([repr(row[k]) if k != "epoch" else int(row[k]) for k in keys])


def cmd_gen_toy(args: argparse.Namespace) -> int:
    config = _resolve_config(args)
    out = _out_dir(config)
    cube, corpus = generate_toy_cube(
        classes=args.classes, bands=args.bands, height=args.height,
        width=args.width, seed=config.seed,
    )
    save_cube(cube, out / "cube.hsc1")
    save_captions(corpus, out / "captions.jsonl")
    print(f"wrote {out / 'cube.hsc1'} ({cube.bands} bands, {cube.height}x{cube.width}, "
          f"{cube.class_count} classes) and captions")
    return EXIT_OK


def _all_patches(cube, side: int) -> np.ndarray:
    rows = []
    for r in range(cube.height):
        for c in range(cube.width):
            rows.append(extract_patch(cube, r, c, side).pixels)
    return np.stack(rows)


def cmd_train_vae(args: argparse.Namespace) -> int:
    config = _resolve_config(args)
    out = _out_dir(config)
    cube = normalize(load_cube(config.paths.cube))
    patches = _all_patches(cube, config.split.side)
    vcfg = VaeConfig(
        in_channels=cube.bands, hidden=config.vae.hidden,
        lambda_kl=config.vae.lambda_kl, lambda_adv=config.vae.lambda_adv,
        lr=config.vae.lr, epochs=config.vae.epochs,
        batch_size=config.vae.batch_size, seed=config.seed,
    )
    result = train_vae(patches, vcfg)
    ckpt.save_vae_checkpoint(out / "vae.ckpt", result.vae, result.discriminator, vcfg)
    _write_history_csv(result.history, out / "vae_loss.csv")
    print(f"VAE trained {vcfg.epochs} epochs; final recon MSE "
          f"{result.history[-1]['recon_mse']:.6f}; checkpoint {out / 'vae.ckpt'}")
    return EXIT_OK


def _split_from_config(cube, corpus, config: RunConfig):
    spec = SplitSpec(
        per_class_train=tuple(config.split.per_class_train),
        unlabeled_pool_size=config.split.unlabeled_size,
        seed=config.seed,
    )
    return sample_issd_split(cube, spec, side=config.split.side, corpus=corpus)


def cmd_train_ldm(args: argparse.Namespace) -> int:
    config = _resolve_config(args)
    out = _out_dir(config)
    cube = normalize(load_cube(config.paths.cube))
    corpus = load_captions(config.paths.captions)
    split = _split_from_config(cube, corpus, config)
    vae, _, _ = ckpt.load_vae_checkpoint(out / "vae.ckpt")
    vocab = build_vocab(corpus)
    tcfg = TrainConfig(
        epochs=config.ldm.epochs, batch_size=config.ldm.batch_size,
        lr=config.ldm.lr, ema_alpha=config.ldm.ema_alpha,
        cond_drop_prob=config.ldm.cond_drop_prob,
        total_steps=config.ldm.total_steps, beta_min=config.ldm.beta_min,
        beta_max=config.ldm.beta_max, seed=config.seed,
    )
    dcfg = DenoiserConfig(
        d_emb=config.ldm.d_emb, blocks=config.ldm.blocks, heads=config.ldm.heads,
        patch_side=config.split.side, total_steps=config.ldm.total_steps,
    )
    result = train_ldm(
        split.train, corpus, split.unlabeled, vae, tcfg, dcfg,
        vocab=vocab, text_layers=config.ldm.text_layers,
    )
    ckpt.save_ldm_checkpoint(
        out / "ldm.ckpt", result.model, result.ema_model, None, tcfg, dcfg,
        vocab.size, config.ldm.text_layers, result.latent_shift,
        result.latent_scale, result.epochs_done,
    )
    save_vocab(vocab, out / "vocab.json")
    schedule_to_csv(result.sched, out / "schedule.csv")
    _write_history_csv(result.history, out / "ldm_loss.csv")
    print(f"LDM trained {tcfg.epochs} epochs; final loss_dm "
          f"{result.history[-1]['loss_dm']:.6f}; checkpoint {out / 'ldm.ckpt'}")
    return EXIT_OK


def _load_artifacts(config: RunConfig, out: Path) -> tuple[LdmArtifacts, object]:
    vae, _, _ = ckpt.load_vae_checkpoint(out / "vae.ckpt")
    _, ema_model, tcfg, _, meta, sections = ckpt.load_ldm_checkpoint(out / "ldm.ckpt")
    vocab = load_vocab(out / "vocab.json")
    sched = make_linear_schedule(tcfg.total_steps, tcfg.beta_min, tcfg.beta_max)
    art = LdmArtifacts(
        ema_model=ema_model, vocab=vocab, sched=sched,
        latent_shift=sections["latent_shift"].astype(np.float64),
        latent_scale=sections["latent_scale"].astype(np.float64),
        trained=True,
    )
    return art, vae


def cmd_sample(args: argparse.Namespace) -> int:
    config = _resolve_config(args)
    out = _out_dir(config)
    omega = config.sample.omega if args.omega is None else args.omega
    if omega < 0:
        raise ArgumentError(f"omega must be >= 0, got {omega}")
    art, vae = _load_artifacts(config, out)
    corpus = load_captions(config.paths.captions) if Path(config.paths.captions).exists() else None
    req = GenerationRequest(
        caption=args.caption, count=args.count, omega=omega,
        steps=config.sample.steps, seed=config.seed, eta=config.sample.eta,
    )
    dataset = generate_patches(req, art, vae, corpus=corpus)
    save_patch_archive(dataset, out / "samples.hsp1")
    print(f"wrote {len(dataset.patches)} patches to {out / 'samples.hsp1'}")
    return EXIT_OK


def _patch_rows(records) -> list[Patch]:
    return [r.patch for r in records]


def _eval_generation(
    config: RunConfig, art: LdmArtifacts, vae, corpus: CaptionCorpus, omega: float
) -> dict[int, list[Patch]]:
    """A fixed per-class evaluation set of generated patches."""
    gen: dict[int, list[Patch]] = {}
    for cls in sorted(corpus.entries):
        caption = corpus.entries[cls][0]
        seed = int(np.random.SeedSequence([config.seed, 9000 + cls]).generate_state(1)[0])
        req = GenerationRequest(
            caption=caption, count=config.eval.per_class_samples, omega=omega,
            steps=config.sample.steps, seed=seed, eta=config.sample.eta,
        )
        gen[cls] = [
            sp.patch for sp in generate_patches(req, art, vae, class_id=cls).patches
        ]
    return gen


def _expand_and_eval(config: RunConfig, omega: float, out: Path):
    """Shared core of expand-eval and sweep-omega: returns result rows."""
    cube = normalize(load_cube(config.paths.cube))
    corpus = load_captions(config.paths.captions)
    split = _split_from_config(cube, corpus, config)
    art, vae = _load_artifacts(config, out)
    records = expand_dataset(
        split.train, config.sample.lam, omega, art, vae, corpus,
        steps=config.sample.steps, seed=config.seed, eta=config.sample.eta,
    )
    gen_eval = _eval_generation(config, art, vae, corpus, omega)
    real_by_class: dict[int, list[Patch]] = {}
    for p in split.train + split.test:
        real_by_class.setdefault(p.center_label, []).append(p)
    fidelity = point_fidelity(real_by_class, gen_eval)

    metrics = []
    for seed in config.eval.seeds:
        ccfg = ClassifierConfig(
            hidden=config.eval.classifier_hidden, epochs=config.eval.classifier_epochs,
            lr=config.eval.classifier_lr, seed=seed,
        )
        for variant, patches in (
            ("baseline", split.train),
            ("expanded", _patch_rows(records)),
        ):
            cm = reference_classifier(patches, split.test, ccfg)
            metrics.append((variant, seed, score(cm)))
    return split, records, gen_eval, real_by_class, fidelity, metrics


def _write_eval_outputs(config, out, split, records, gen_eval, real_by_class, fidelity, metrics, omega):
    with open(out / "metrics.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["variant", "seed", "oa", "aa", "kappa"])
        for variant, seed, sc in metrics:
            writer.writerow([variant, seed, repr(sc.oa), repr(sc.aa), repr(sc.kappa)])
    with open(out / "per_class.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["variant", "seed", "class", "accuracy"])
        for variant, seed, sc in metrics:
            for cls, acc in enumerate(sc.per_class, start=1):
                writer.writerow([variant, seed, cls, repr(acc)])
    with open(out / "point_fidelity.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["class", "max", "min"])
        for cls, (mx, mn) in sorted(fidelity.items()):
            writer.writerow([cls, repr(mx), repr(mn)])
    with open(out / "spectral_stats.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["source", "class", "band", "mean", "std"])
        for cls in sorted(real_by_class):
            for source, patches in (("real", real_by_class[cls]), ("generated", gen_eval[cls])):
                stats = spectral_stats(patches, cls)
                for band in range(stats.mean.shape[0]):
                    writer.writerow(
                        [source, cls, band, repr(float(stats.mean[band])), repr(float(stats.std[band]))]
                    )
    spectra = []
    labels = []
    sources = []
    for cls in sorted(real_by_class):
        for p in real_by_class[cls]:
            spectra.append(p.center_spectrum())
            labels.append(cls)
            sources.append("real")
        for p in gen_eval[cls]:
            spectra.append(p.center_spectrum())
            labels.append(cls)
            sources.append("generated")
    coords = pca_2d(np.stack(spectra))
    with open(out / "pca.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["x", "y", "class", "source"])
        for (x, y), cls, src in zip(coords, labels, sources):
            writer.writerow([repr(float(x)), repr(float(y)), cls, src])

    def _mean(variant, metric):
        vals = [getattr(sc, metric) for v, _, sc in metrics if v == variant]
        return sum(vals) / len(vals)

    n_synth = sum(1 for r in records if r.synthetic)
    lines = [
        "expansion and evaluation report",
        f"omega {omega!r}  lambda {config.sample.lam!r}  seeds {list(config.eval.seeds)}",
        f"train patches {len(split.train)}  synthetic added {n_synth}  test patches {len(split.test)}",
        "",
        "variant    mean_oa    mean_aa    mean_kappa",
    ]
    for variant in ("baseline", "expanded"):
        lines.append(
            f"{variant:9s}  {_mean(variant, 'oa'):.6f}  {_mean(variant, 'aa'):.6f}  "
            f"{_mean(variant, 'kappa'):.6f}"
        )
    lines.append("")
    lines.append("point fidelity (class: max / min)")
    for cls, (mx, mn) in sorted(fidelity.items()):
        lines.append(f"  class {cls}: {mx:.6f} / {mn:.6f}")
    (out / "report.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")
    return _mean("baseline", "aa"), _mean("expanded", "aa")


def cmd_expand_eval(args: argparse.Namespace) -> int:
    config = _resolve_config(args)
    out = _out_dir(config)
    omega = config.sample.omega
    split, records, gen_eval, real_by_class, fidelity, metrics = _expand_and_eval(config, omega, out)
    base_aa, exp_aa = _write_eval_outputs(
        config, out, split, records, gen_eval, real_by_class, fidelity, metrics, omega
    )
    print(f"baseline mean AA {base_aa:.6f}; expanded mean AA {exp_aa:.6f}; report {out / 'report.txt'}")
    return EXIT_OK


def cmd_attn_export(args: argparse.Namespace) -> int:
    config = _resolve_config(args)
    out = _out_dir(config)
    art, _ = _load_artifacts(config, out)
    t = args.step if args.step is not None else art.sched.steps // 2
    tokens = tokenize(args.caption, art.vocab)
    rng = np.random.default_rng(config.seed)
    net = art.ema_model.net
    side = net.config.patch_side
    z_t = torch.as_tensor(rng.standard_normal((1, 4, side, side)), dtype=torch.float32)
    with torch.no_grad():
        ctx = art.ema_model.text.encode(tokens).tokens_emb[None, :, :]
        _, maps = net(z_t, t, ctx)
    paths = export_attention(maps, tokens, art.vocab, out / "attn")
    print(f"exported {sum(1 for p in paths if p.suffix == '.pgm')} attention rasters to {out / 'attn'}")
    return EXIT_OK


def cmd_sweep_omega(args: argparse.Namespace) -> int:
    config = _resolve_config(args)
    out = _out_dir(config)
    omegas = [float(v) for v in args.omegas.split(",") if v.strip()]
    if not omegas:
        raise ArgumentError("no omega values given")
    if any(w < 0 for w in omegas):
        raise ArgumentError("omega values must be >= 0")
    rows = []
    baseline_row = None
    for omega in omegas:
        _, _, _, _, _, metrics = _expand_and_eval(config, omega, out)
        def _mean(variant, metric):
            vals = [getattr(sc, metric) for v, _, sc in metrics if v == variant]
            return sum(vals) / len(vals)
        if baseline_row is None:
            baseline_row = ("baseline", _mean("baseline", "oa"), _mean("baseline", "aa"),
                            _mean("baseline", "kappa"))
        rows.append((repr(omega), _mean("expanded", "oa"), _mean("expanded", "aa"),
                     _mean("expanded", "kappa")))
    with open(out / "sweep.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["omega", "oa", "aa", "kappa"])
        writer.writerow([baseline_row[0]] + [repr(v) for v in baseline_row[1:]])
        for row in rows:
            writer.writerow([row[0]] + [repr(v) for v in row[1:]])
    print(f"swept {len(omegas)} omega values; results in {out / 'sweep.csv'}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="hsidiff",
        description="Language-conditioned latent diffusion for hyperspectral patches",
    )
    parser.add_argument("--config", help="INI configuration file")
    parser.add_argument("--seed", type=int, help="override the config seed")
    parser.add_argument("--out", help="override the output directory")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-toy", help="synthesize the toy cube and captions")
    p.add_argument("--classes", type=int, default=3)
    p.add_argument("--bands", type=int, default=8)
    p.add_argument("--height", type=int, default=32)
    p.add_argument("--width", type=int, default=32)
    p.set_defaults(func=cmd_gen_toy)

    p = sub.add_parser("train-vae", help="train the spectral-compression VAE")
    p.set_defaults(func=cmd_train_vae)

    p = sub.add_parser("train-ldm", help="train the conditional latent diffusion stage")
    p.set_defaults(func=cmd_train_ldm)

    p = sub.add_parser("sample", help="generate patches for one caption")
    p.add_argument("--caption", required=True)
    p.add_argument("--count", type=int, default=4)
    p.add_argument("--omega", type=float, default=None)
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("expand-eval", help="class-balanced expansion plus evaluation")
    p.set_defaults(func=cmd_expand_eval)

    p = sub.add_parser("attn-export", help="export cross-attention maps for a caption")
    p.add_argument("--caption", required=True)
    p.add_argument("--step", type=int, default=None)
    p.set_defaults(func=cmd_attn_export)

    p = sub.add_parser("sweep-omega", help="evaluate a list of guidance weights")
    p.add_argument("--omegas", required=True, help="comma-separated omega values")
    p.set_defaults(func=cmd_sweep_omega)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ArgumentError, ValidationError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ARGS
    except TrainingDivergedError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (FormatError, NumericDomainError, StateError, HsidiffError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
