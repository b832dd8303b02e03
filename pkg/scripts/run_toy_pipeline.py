#!/usr/bin/env python3
"""Run the full pipeline on the synthetic toy cube via the CLI.

Generates a cube, trains both stages, samples patches for one caption,
expands the training split with class-balanced synthesis, evaluates, and
exports attention maps — all into one output directory. Use --quick for a
smoke-test-sized run (a couple of minutes on a laptop core).
"""

import argparse
import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parent.parent / "src"))

from hsidiff.cli import main as cli
from hsidiff.config import (
    EvalSection,
    LdmSection,
    PathsConfig,
    RunConfig,
    SampleSection,
    SplitSection,
    VaeSection,
    save_config,
)
from hsidiff.cube import load_captions


def build_config(out: Path, quick: bool, seed: int) -> RunConfig:
    if quick:
        vae = VaeSection(epochs=40, lambda_adv=0.0, hidden=16, lr=2e-3)
        ldm = LdmSection(d_emb=16, blocks=1, heads=2, epochs=40, lr=1e-3,
                         batch_size=8, text_layers=1)
        sample = SampleSection(omega=0.7, steps=20, lam=0.4)
        evals = EvalSection(classifier_epochs=50, per_class_samples=4, seeds=(0, 1))
    else:
        vae = VaeSection(epochs=200, lambda_adv=0.0, hidden=24, lr=2e-3)
        ldm = LdmSection(d_emb=48, blocks=3, heads=4, epochs=300, lr=1e-3,
                         batch_size=4, text_layers=2)
        sample = SampleSection(omega=0.7, steps=200, lam=1.0)
        evals = EvalSection(classifier_epochs=40, classifier_hidden=8,
                            per_class_samples=16, seeds=(0, 1, 2))
    return RunConfig(
        paths=PathsConfig(cube=str(out / "cube.hsc1"),
                          captions=str(out / "captions.jsonl"),
                          out_dir=str(out)),
        vae=vae,
        ldm=ldm,
        sample=sample,
        split=SplitSection(per_class_train=(3, 8, 15), unlabeled_size=64, side=5),
        eval=evals,
        seed=seed,
    )


def run(args: list[str]) -> None:
    print(f"$ hsidiff {' '.join(args)}", flush=True)
    rc = cli(args)
    if rc != 0:
        raise SystemExit(f"command failed with exit code {rc}: {' '.join(args)}")


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--out", default="out/toy", help="output directory")
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--quick", action="store_true", help="tiny smoke-test budgets")
    parser.add_argument("--skip-sweep", action="store_true", help="skip the omega sweep")
    args = parser.parse_args()

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    config = build_config(out, args.quick, args.seed)
    ini = out / "run.ini"
    save_config(config, ini)
    base = ["--config", str(ini)]

    run(base + ["gen-toy", "--classes", "3", "--bands", "8",
                "--height", "32", "--width", "32"])
    run(base + ["train-vae"])
    run(base + ["train-ldm"])

    caption = load_captions(out / "captions.jsonl").entries[1][0]
    run(base + ["sample", "--caption", caption, "--count", "4"])
    run(base + ["expand-eval"])
    run(base + ["attn-export", "--caption", caption])
    if not args.skip_sweep:
        run(base + ["sweep-omega", "--omegas", "0.0,0.7,1.5"])

    print("\nartifacts:")
    for path in sorted(out.rglob("*")):
        if path.is_file():
            print(f"  {path.relative_to(out)}  ({path.stat().st_size} bytes)")
    print(f"\nreport:\n{(out / 'report.txt').read_text()}")


if __name__ == "__main__":
    main()
