"""
SNOW-V side-channel lab

Command-line entry point: simulate leaky trace campaigns, gate them with
TVLA, profile LDA / FCN classifiers, attack, and tabulate results.

Exit codes: 0 clean, 2 findings (leakage detected or attack failed), 1 error.
"""
import argparse
import json
import logging
import sys
from dataclasses import asdict, is_dataclass
from datetime import datetime, timezone
from pathlib import Path
from typing import List, Optional

import numpy as np
import pandas as pd

import attack
import leakage_sim
import trace_store
import tvla
from config import TOOL_NAME, TOOL_VERSION, get_settings
from ml_utils import ACTIVATIONS, TORCH_AVAILABLE, TrainConfig
from snowv_core import IV_SIZE, KEY_SIZE

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_FINDINGS = 2


def _jsonable(value):
    if is_dataclass(value):
        return _jsonable(asdict(value))
    if isinstance(value, dict):
        return {str(k): _jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    if isinstance(value, bytes):
        return value.hex()
    if isinstance(value, Path):
        return str(value)
    if isinstance(value, np.generic):
        return value.item()
    if isinstance(value, float) and not np.isfinite(value):
        return None
    return value


def write_manifest(out_dir: Path, args: argparse.Namespace, resolved: dict) -> Path:
    """Record the exact resolved configuration of a run."""
    manifest = {
        "tool": TOOL_NAME,
        "version": TOOL_VERSION,
        "command": args.command,
        "seed": args.seed,
        "config": _jsonable(resolved),
        "created": datetime.now(timezone.utc).isoformat(),
    }
    path = out_dir / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return path


def _hex_bytes(text: Optional[str], size: int, what: str) -> Optional[bytes]:
    if text is None:
        return None
    data = bytes.fromhex(text)
    if len(data) != size:
        raise ValueError(f"{what} must be {size} bytes ({2 * size} hex digits), got {len(data)}")
    return data


def _load_traces(path: str) -> trace_store.TraceSet:
    ts = trace_store.load(path)
    logger.info("Loaded %d traces x %d samples from %s", len(ts), ts.samples_per_trace, path)
    return ts


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def cmd_simulate(args, out_dir: Path) -> int:
    if args.granularity == "bit":
        model = leakage_sim.LeakModel.bit_level(noise_sigma=args.noise_sigma, scale=args.scale,
                                                background_len=args.background_len)
    elif args.granularity == "pulse":
        model = leakage_sim.LeakModel.pulsed(noise_sigma=args.noise_sigma, scale=args.scale,
                                             background_len=args.background_len)
    else:
        model = leakage_sim.LeakModel(scale=args.scale, noise_sigma=args.noise_sigma,
                                      samples_per_step=args.samples_per_step,
                                      background_len=args.background_len)
    ts = leakage_sim.simulate_campaign(
        args.n, args.key_policy, args.iv_policy, model, leakage_sim.Rng(args.seed),
        key=_hex_bytes(args.key, KEY_SIZE, "--key"), iv=_hex_bytes(args.iv, IV_SIZE, "--iv"),
        jobs=args.jobs)
    path = trace_store.save(ts, out_dir / args.file)
    write_manifest(out_dir, args, {"n": args.n, "key_policy": args.key_policy, "iv_policy": args.iv_policy,
                                   "leak_model": model, "file": path.name})
    print(f"✅ Wrote {len(ts)} traces ({model.samples_per_trace} samples each) to {path}")
    return EXIT_OK


def cmd_tvla(args, out_dir: Path) -> int:
    ts = _load_traces(args.input)
    report = tvla.welch_t(ts, threshold=args.threshold)
    report.to_frame().to_csv(out_dir / "tvla.csv", index=False)
    write_manifest(out_dir, args, {"input": args.input, "threshold": args.threshold,
                                   "group_sizes": report.group_sizes})
    if report.has_leak:
        print(f"⚠️ Leakage detected: {report.summary()}")
        return EXIT_FINDINGS
    print(f"✅ No leakage: {report.summary()}")
    return EXIT_OK


def _attack_config(args) -> attack.AttackConfig:
    train_cfg = TrainConfig(epochs=args.epochs, batch_size=args.batch_size,
                            learning_rate=args.learning_rate, seed=args.seed)
    return attack.AttackConfig(top_k=args.top_k, pca_top_k=args.pca_top_k, shrinkage=args.shrinkage,
                               pca_variance=args.pca_variance, activation=args.activation, train=train_cfg)


def cmd_train(args, out_dir: Path) -> int:
    if args.method == "fcn" and not TORCH_AVAILABLE:
        raise ImportError("FCN training needs PyTorch. Please install it using: pip install torch")
    ts = _load_traces(args.input)
    if args.crop:
        start, stop = (int(v) for v in args.crop.split(":"))
        ts = ts.crop(start, stop)
    spec = trace_store.SplitSpec.from_ratio(args.split, seed=args.seed)
    train, val, test = trace_store.split(ts, spec)
    cfg = _attack_config(args)
    preprocess = "pca" if args.pca else "none"
    target = attack.TargetSpec(args.word, args.index, args.step, args.bits, args.half, args.after_update)

    if args.recovery:
        results = attack.train_recovery_classifiers(train, val, test, args.method, preprocess, cfg, jobs=args.jobs)
    elif args.sweep:
        if args.method != "fcn":
            raise ValueError("--sweep profiles FCN activations; use --method fcn")
        frame = attack.activation_sweep(train, val, test, target, preprocess=preprocess, cfg=cfg)
        frame.to_csv(out_dir / f"sweep_fcn_{preprocess}.csv", index=False)
        results = []
    elif args.curve:
        sizes = [int(s) for s in args.curve.split(",")]
        frame = attack.learning_curve(train, val, test, target, sizes, args.method, preprocess, cfg)
        frame.to_csv(out_dir / f"curve_{args.method}.csv", index=False)
        results = []
    else:
        results = [attack.run_profiling_attack(train, val, test, target, args.method, preprocess, cfg)]

    if results:
        attack.save_classifiers([r.classifier for r in results], out_dir / "models.svml")
        rows = [r.to_row() for r in results]
        (out_dir / "results.json").write_text(json.dumps(_jsonable(rows), indent=2))
        pd.DataFrame(rows).to_csv(out_dir / "results.csv", index=False)
    write_manifest(out_dir, args, {"input": args.input, "split": spec, "sizes": spec.sizes(len(ts)),
                                   "crop": args.crop, "target": target, "method": args.method, "preprocess": preprocess,
                                   "recovery": args.recovery, "attack": cfg})
    for r in results:
        print(f"✅ {r.target.name}: train {r.train_acc:.4f}, test {r.test_acc:.4f}")
    if not results:
        print(f"✅ Wrote sweep tables to {out_dir}")
    return EXIT_OK


def cmd_attack(args, out_dir: Path) -> int:
    classifiers = attack.load_classifiers(args.models)
    ts = _load_traces(args.input)
    result = attack.recover_full_key(
        classifiers, ts, iv=_hex_bytes(args.iv, IV_SIZE, "--iv"), budget=args.budget,
        min_margin=args.min_margin,
        keystream_sample=bytes.fromhex(args.keystream) if args.keystream else None,
        true_key=_hex_bytes(args.true_key, KEY_SIZE, "--true-key"))
    report = attack.attack_report(result)
    (out_dir / "attack.json").write_text(json.dumps(_jsonable(report), indent=2))
    write_manifest(out_dir, args, {"models": args.models, "input": args.input, "budget": args.budget,
                                   "min_margin": args.min_margin})
    if result.low_confidence:
        print(f"⚠️ Low-confidence words: {', '.join(result.low_confidence)}")
    if not result.success:
        print(f"❌ Key recovery failed ({len(result.key_mismatches)} key bytes, "
              f"{len(result.keystream_mismatches)} keystream bytes differ): {result.recovered_key.hex()}")
        return EXIT_FINDINGS
    print(f"✅ Recovered key {result.recovered_key.hex()} from {result.n_traces} traces")
    return EXIT_OK


def cmd_mtd(args, out_dir: Path) -> int:
    if args.p is not None:
        probabilities = {"p": args.p}
    elif args.result:
        report = json.loads(Path(args.result).read_text())
        probabilities = {w["name"]: w["accuracy"] for w in report["words"] if w.get("accuracy") is not None}
        if not probabilities:
            raise ValueError(f"{args.result} carries no per-trace accuracies (attack ran without ground truth)")
    else:
        raise ValueError("mtd needs --p or --result")

    rows, curves = [], []
    for name, p in probabilities.items():
        try:
            n, curve = attack.mtd(p, target=args.target, max_n=args.max_n)
        except attack.NoConvergenceError as e:
            logger.warning("⚠️ %s: %s", name, e)
            n, curve = None, []
        rows.append({"source": "measured", "word": name, "p": p, "mtd": n, "reported_mtd": None})
        curves += [{"word": name, "n": k, "probability": prob} for k, prob in curve]
    pd.DataFrame(curves).to_csv(out_dir / "curve_vote.csv", index=False)
    reported = attack.reported_mtd_rows(args.target)
    rows += [{"source": "reported", "word": r["method"], "p": r["reported_accuracy"], "mtd": r["formula_mtd"],
              "reported_mtd": r["reported_mtd"]} for r in reported]
    pd.DataFrame(rows).to_csv(out_dir / "mtd.csv", index=False)
    write_manifest(out_dir, args, {"probabilities": probabilities, "target": args.target})
    for row in rows:
        if row["source"] == "measured":
            print(f"✅ {row['word']}: p={row['p']:.4f} -> MTD {row['mtd']}")
    for r in reported:
        implied = ""
        if r["formula_mtd"] is not None:
            implied = f" (majority vote at p={r['reported_accuracy']:.4f} needs {r['formula_mtd']})"
        print(f"Reported MTD {r['method']}: {r['reported_mtd']}{implied}")
    return EXIT_OK


def cmd_report(args, out_dir: Path) -> int:
    """Measured sweep tables side by side with the reported ones."""
    sweep_dir = Path(args.input)
    if not sweep_dir.is_dir():
        raise FileNotFoundError(f"sweep directory not found: {sweep_dir}")
    written = []
    for preprocess, name in (("pca", "table_fcn_pca.csv"), ("none", "table_fcn.csv")):
        table = attack.reported_fcn_frame(with_pca=preprocess == "pca")
        measured = sweep_dir / f"sweep_fcn_{preprocess}.csv"
        if measured.exists():
            frame = pd.read_csv(measured)[["activation", "bits", "train_acc", "test_acc"]]
            table = table.merge(frame, on=["activation", "bits"], how="left")
        table.to_csv(out_dir / name, index=False)
        written.append(name)

    lda = attack.reported_lda_frame()
    curve = sweep_dir / "curve_lda.csv"
    if curve.exists():
        measured = pd.read_csv(curve)[["bits", "n_train", "test_acc"]]
        lda = lda.merge(measured, on=["bits", "n_train"], how="outer")
    lda.to_csv(out_dir / "table_lda.csv", index=False)
    written.append("table_lda.csv")

    vote_rows = []
    for label, p in _vote_sources(sweep_dir).items():
        for _, row in attack.voting_curve(p, args.n_max).iterrows():
            vote_rows.append({"source": label, "p": p, "n": int(row["n"]), "probability": row["probability"]})
    pd.DataFrame(vote_rows, columns=["source", "p", "n", "probability"]).to_csv(out_dir / "curve_vote.csv", index=False)
    written.append("curve_vote.csv")

    write_manifest(out_dir, args, {"input": str(sweep_dir), "n_max": args.n_max})
    print(f"✅ Wrote {', '.join(written)} to {out_dir}")
    return EXIT_OK


def _vote_sources(sweep_dir: Path) -> dict:
    """8-bit test accuracies to draw voting curves for."""
    sources = {f"reported LDA {n}": acc for n, acc in attack.REPORTED_LDA_ACCURACY[8].items()}
    results = sweep_dir / "results.csv"
    if results.exists():
        frame = pd.read_csv(results)
        for _, row in frame[frame["bits"] == 8].iterrows():
            label = f"measured {row['method']}/{row['preprocess']} {row['lfsr']}[{row['index']}] step {row['step']}"
            if np.isfinite(row["test_acc"]):
                sources[label] = float(row["test_acc"])
    return sources


def cmd_export(args, out_dir: Path) -> int:
    ts = _load_traces(args.input)
    if args.format != "csv":
        raise ValueError(f"unsupported export format {args.format!r}")
    path = trace_store.export_csv(ts, out_dir / (Path(args.input).stem + ".csv"))
    write_manifest(out_dir, args, {"input": args.input, "format": args.format})
    print(f"✅ Exported {len(ts)} traces to {path}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# Argument parsing
# ---------------------------------------------------------------------------

class CliParser(argparse.ArgumentParser):
    """Usage errors exit 1; status 2 is reserved for findings."""

    def error(self, message):
        raise ValueError(f"{self.prog}: {message}")


def build_parser() -> argparse.ArgumentParser:
    settings = get_settings()
    parser = CliParser(prog=TOOL_NAME, description=__doc__,
                                     formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("--version", action="version", version=f"{TOOL_NAME} {TOOL_VERSION}")
    parser.add_argument("--seed", type=int, default=settings.seed,
                        help="master seed (default: $SNOWV_SCA_SEED or %(default)s)")
    parser.add_argument("--jobs", type=int, default=settings.jobs, help="worker processes (default: %(default)s)")
    parser.add_argument("--log-level", default=settings.log_level,
                        choices=("DEBUG", "INFO", "WARNING", "ERROR"), help="logging level")
    parser.add_argument("--out", default=settings.out_dir, help="output directory (default: %(default)s)")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="simulate a leaky trace campaign into an SVTR file")
    p.add_argument("--n", type=int, required=True, help="number of traces")
    p.add_argument("--key-policy", choices=leakage_sim.KEY_POLICIES, default="fixed")
    p.add_argument("--iv-policy", choices=leakage_sim.IV_POLICIES, default="random")
    p.add_argument("--noise-sigma", type=float, default=1.0, help="Gaussian noise standard deviation")
    p.add_argument("--granularity", choices=("word", "bit", "pulse"), default="word",
                   help="Hamming weight per word, one sample per bit, or a multi-sample pulse per bit")
    p.add_argument("--scale", type=float, default=1.0, help="leakage amplitude")
    p.add_argument("--samples-per-step", type=int, default=32, help="samples per LFSR step (word mode)")
    p.add_argument("--background-len", type=int, default=64, help="leading samples without leakage")
    p.add_argument("--key", help="fixed key as 64 hex digits (default: drawn from the seed)")
    p.add_argument("--iv", help="fixed IV as 32 hex digits (default: drawn from the seed)")
    p.add_argument("--file", default="traces.svtr", help="output file name inside --out")

    p = sub.add_parser("tvla", help="fixed-vs-random Welch t-test")
    p.add_argument("--in", dest="input", required=True, help="SVTR file")
    p.add_argument("--threshold", type=float, default=tvla.DEFAULT_THRESHOLD, help="|t| leak threshold")

    p = sub.add_parser("train", help="profile classifiers for a target word")
    p.add_argument("--in", dest="input", required=True, help="SVTR file with per-trace keys")
    p.add_argument("--word", choices=attack.LFSRS, default="A", help="LFSR holding the target word")
    p.add_argument("--index", type=int, default=8, help="word index in the LFSR")
    p.add_argument("--step", type=int, default=0, help="LFSR step exposing the word")
    p.add_argument("--bits", type=int, choices=attack.LABEL_BITS, default=8, help="label bits")
    p.add_argument("--half", choices=attack.BYTE_HALVES, default="low", help="byte of the 16-bit word")
    p.add_argument("--after-update", action="store_true", help="read the word after the step executes")
    p.add_argument("--method", choices=attack.METHODS, default="lda")
    p.add_argument("--pca", action="store_true", help="reduce features with PCA before the classifier")
    p.add_argument("--pca-variance", type=float, default=0.99, help="PCA variance to keep")
    p.add_argument("--activation", choices=ACTIVATIONS, default="relu")
    p.add_argument("--epochs", type=int, default=100)
    p.add_argument("--batch-size", type=int, default=128)
    p.add_argument("--learning-rate", type=float, default=1e-3)
    p.add_argument("--top-k", type=int, default=16, help="KVC points kept without PCA")
    p.add_argument("--pca-top-k", type=int, default=64, help="KVC points fed to PCA")
    p.add_argument("--crop", help="START:STOP sample window to profile on")
    p.add_argument("--shrinkage", type=float, default=1e-3, help="LDA covariance shrinkage")
    p.add_argument("--split", default="64:16:20", help="train:val:test or train:test ratio")
    mode = p.add_mutually_exclusive_group()
    mode.add_argument("--recovery", action="store_true", help="train all 32 key-recovery classifiers")
    mode.add_argument("--sweep", action="store_true", help="FCN sweep over activations and 1/2/4/8 bits")
    mode.add_argument("--curve", help="comma-separated training sizes for a learning curve")

    p = sub.add_parser("attack", help="recover the full key from attack traces")
    p.add_argument("--models", required=True, help="classifier bundle from `train --recovery`")
    p.add_argument("--in", dest="input", required=True, help="SVTR file of one fixed key")
    p.add_argument("--iv", help="IV as 32 hex digits (default: per-trace IVs)")
    p.add_argument("--budget", type=int, help="attack traces to use (rounded to odd)")
    p.add_argument("--min-margin", type=float, default=0.0, help="vote margin below which a word is flagged")
    p.add_argument("--keystream", help="known keystream (hex) for verification")
    p.add_argument("--true-key", help="ground-truth key (hex) for scoring")

    p = sub.add_parser("mtd", help="minimum traces to disclosure under majority voting")
    source = p.add_mutually_exclusive_group(required=True)
    source.add_argument("--p", type=float, help="per-trace accuracy")
    source.add_argument("--result", help="attack.json with per-word accuracies")
    p.add_argument("--target", type=float, default=attack.DEFAULT_MTD_TARGET)
    p.add_argument("--max-n", type=int, default=100_001)

    p = sub.add_parser("report", help="tables and curves from a sweep directory")
    p.add_argument("--in", dest="input", required=True, help="directory holding train outputs")
    p.add_argument("--n-max", type=int, default=101, help="largest trace count on voting curves")

    p = sub.add_parser("export", help="export an SVTR file")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--format", choices=("csv",), default="csv")
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    """Parse arguments and route to the command."""
    try:
        args = build_parser().parse_args(argv)
    except ValueError as e:
        print(f"❌ {e}", file=sys.stderr)
        return EXIT_ERROR
    logging.basicConfig(level=args.log_level, format="%(asctime)s %(levelname)s %(name)s: %(message)s")

    try:
        if args.jobs < 1:
            raise ValueError("--jobs must be >= 1")
        out_dir = Path(args.out)
        out_dir.mkdir(parents=True, exist_ok=True)

        # Command routing
        if args.command == "simulate":
            return cmd_simulate(args, out_dir)
        elif args.command == "tvla":
            return cmd_tvla(args, out_dir)
        elif args.command == "train":
            return cmd_train(args, out_dir)
        elif args.command == "attack":
            return cmd_attack(args, out_dir)
        elif args.command == "mtd":
            return cmd_mtd(args, out_dir)
        elif args.command == "report":
            return cmd_report(args, out_dir)
        elif args.command == "export":
            return cmd_export(args, out_dir)
        raise ValueError(f"unknown command {args.command!r}")
    except (ValueError, OSError, RuntimeError, ImportError, KeyError) as e:
        logger.error("❌ %s", e)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
