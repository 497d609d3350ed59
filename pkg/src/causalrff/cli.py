"""Command-line pipeline: ``generate``, ``train``, ``evaluate`` and ``bounds``.

Exit codes: 0 on success, 1 on invalid input (configuration, flags, data),
2 on a failure while running.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import metrics
from .config import ConfigError, ExperimentConfig, describe_defaults
from .data import load_csv_source, load_truth_csv, make_benchmark, write_benchmark
from .effects import estimate_effects, global_ate
from .errors import CausalRFFError, DomainError, IngestionError, ParameterError, ShapeError
from .federation import run_training
from .federation.transport import TRANSPORTS
from .model import FACTOR_NAMES, GlobalModel, init_model
from .training import write_loss_history

log = logging.getLogger("causalrff")

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2
CLAMP_LOGIT = 40.0   # logistic(40) rounds to exactly 1.0


class _Parser(argparse.ArgumentParser):
    # usage errors count as invalid input
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_INVALID, f"{self.prog}: error: {message}\n")


# ---------------------------------------------------------------------------
# data directories


@dataclass
class SourceFiles:
    datasets: list
    truths: list          # per source: dict from load_truth_csv, or None
    manifest: dict | None

    def rows(self, s: int, split: str) -> np.ndarray:
        n = len(self.datasets[s])
        if split == "all" or self.manifest is None:
            return np.arange(n)
        lo, hi = self.manifest["splits"][s][split]
        return np.arange(lo, min(hi, n))


def load_data_dir(path) -> SourceFiles:
    """Read ``source_<k>.csv`` files (and truth/manifest files when present)."""
    root = Path(path)
    if not root.is_dir():
        raise ConfigError(f"data directory {root} does not exist")
    manifest = None
    if (root / "manifest.json").exists():
        manifest = json.loads((root / "manifest.json").read_text())
    datasets, truths = [], []
    k = 0
    while (root / f"source_{k}.csv").exists():
        datasets.append(load_csv_source(root / f"source_{k}.csv"))
        tp = root / f"source_{k}_truth.csv"
        truths.append(load_truth_csv(tp) if tp.exists() else None)
        k += 1
    if not datasets:
        raise ConfigError(f"no source_<k>.csv files in {root}")
    if manifest is not None and manifest.get("m", len(datasets)) != len(datasets):
        raise ConfigError(f"manifest lists {manifest['m']} sources, found {len(datasets)} files")
    if len({ds.d_x for ds in datasets}) != 1:
        raise IngestionError("sources disagree on the number of covariates")
    return SourceFiles(datasets, truths, manifest)


def _check_consistent(cfg: ExperimentConfig, files: SourceFiles):
    if files.manifest is None:
        return
    if len(files.datasets) != cfg.benchmark.m:
        raise ConfigError(f"config has benchmark.m={cfg.benchmark.m}, data has {len(files.datasets)} sources")
    if files.datasets[0].d_x != cfg.benchmark.d_x:
        raise ConfigError(f"config has benchmark.d_x={cfg.benchmark.d_x}, data has {files.datasets[0].d_x}")


# ---------------------------------------------------------------------------
# commands


def cmd_generate(cfg: ExperimentConfig, out: Path) -> Path:
    b = cfg.benchmark
    sources, gt = make_benchmark(b.kind, b.m, b.n_per_source, cfg.seed, b.d_x, b.train, b.test,
                                 b.val, b.sigma0, b.sigma1)
    recorded = cfg.to_dict()
    recorded.pop("out_dir")   # keeps the manifest independent of where it is written
    data = write_benchmark(out / "data", sources, gt, {"kind": b.kind, "seed": cfg.seed, "config": recorded})
    log.info("wrote %d sources to %s", len(sources), data)
    return data


def initial_model(cfg: ExperimentConfig, m: int, d_x: int) -> GlobalModel:
    mc = cfg.model
    clamped = mc.factors == "clamped"
    return init_model(m, d_x, mc.hyperparams(), mc.num_features, mc.kernel, tuple(mc.lengthscale),
                      mc.nu, cfg.seed, mc.init_scale,
                      factor_init=CLAMP_LOGIT if clamped else mc.factor_init,
                      trainable_factors=not clamped)


def cmd_train(cfg: ExperimentConfig, data_dir: Path, out: Path, checkpoint: Path):
    files = load_data_dir(data_dir)
    _check_consistent(cfg, files)
    train = [ds.subset(files.rows(s, "train")) for s, ds in enumerate(files.datasets)]
    model = initial_model(cfg, len(train), train[0].d_x)
    t = cfg.training
    result = run_training(model, train, t.rounds, t.learning_rate, t.momentum, cfg.seed,
                          cfg.transport, cfg.listen)
    checkpoint.parent.mkdir(parents=True, exist_ok=True)
    checkpoint.write_text(json.dumps(result.model.to_dict(), sort_keys=True) + "\n")
    history = result.history[::t.log_every]
    write_loss_history(out / "losses.csv", history)
    for name in FACTOR_NAMES:
        np.savetxt(out / f"factors_{name}.csv", result.model.factors.values(name), delimiter=",",
                   fmt="%.17g")
    log.info("trained %d rounds; checkpoint %s", t.rounds, checkpoint)
    return result


def _load_checkpoint(path: Path) -> GlobalModel:
    try:
        d = json.loads(Path(path).read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read checkpoint {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"checkpoint {path} is not valid JSON: {exc}") from exc
    try:
        return GlobalModel.from_dict(d)
    except (KeyError, TypeError, AttributeError) as exc:
        raise ConfigError(f"checkpoint {path} is malformed: {exc!r}") from exc


_METRIC_COLS = ["source", "n", "ate_true", "ate_est", "eps_ate", "sqrt_pehe"]
_EFFECT_COLS = ["record_id", "source_id", "cate", "cate_true"]


def evaluate_model(cfg: ExperimentConfig, model: GlobalModel, files: SourceFiles):
    """Per-source and global metric rows plus per-record effect rows.

    Effect rows are ``record_id, source_id, cate, cate_true``; each source
    ends with a ``LOCAL_ATE`` row and the table with a ``GLOBAL_ATE`` row.
    """
    if model.m != len(files.datasets) or model.d_x != files.datasets[0].d_x:
        raise ConfigError(f"checkpoint has m={model.m}, d_x={model.d_x}; data has "
                          f"m={len(files.datasets)}, d_x={files.datasets[0].d_x}")
    sc, ec = cfg.sampler, cfg.evaluation
    rows, effects, pairs = [], [], []
    all_true, all_est = [], []
    have_truth = all(t is not None for t in files.truths)
    for s, ds in enumerate(files.datasets):
        idx = files.rows(s, ec.split)
        if ec.max_rows is not None:
            idx = idx[:ec.max_rows]
        if len(idx) == 0:
            log.warning("source %d has no %s rows; skipped", s, ec.split)
            continue
        est = estimate_effects(model, s, ds.x[idx], sc.N, sc.kind, cfg.seed, sc.chain_len,
                               sc.burn_in, ec.workers)
        pairs.append((est.local_ate, est.n))
        truth = files.truths[s]["cate"][idx] if have_truth else None
        for j, i in enumerate(idx):
            uid = ds.unit_ids[i] if ds.unit_ids is not None else str(i)
            effects.append([uid, s, float(est.cate[j]), float(truth[j]) if truth is not None else ""])
        ate_true = float(np.mean(truth)) if truth is not None and len(truth) else ""
        effects.append(["LOCAL_ATE", s, est.local_ate, ate_true])
        if truth is not None:
            rows.append([s, est.n, ate_true, est.local_ate,
                         metrics.ate_error(ate_true, est.local_ate), metrics.pehe(truth, est.cate)])
            all_true.append(truth)
            all_est.append(est.cate)
    if not pairs:
        raise ConfigError(f"no {ec.split} rows in any source")
    if have_truth:
        tt, ee = np.concatenate(all_true), np.concatenate(all_est)
        ate_true = global_ate([(float(np.mean(t)), len(t)) for t in all_true])
        ate_est = global_ate(pairs)
        rows.append(["global", len(tt), ate_true, ate_est, metrics.ate_error(ate_true, ate_est),
                     metrics.pehe(tt, ee)])
        effects.append(["GLOBAL_ATE", "", ate_est, ate_true])
    else:
        effects.append(["GLOBAL_ATE", "", global_ate(pairs), ""])
    return rows, effects


def _write_csv(path: Path, header, rows):
    with open(path, "w", newline="") as fh:
        out = csv.writer(fh)
        out.writerow(header)
        for r in rows:
            out.writerow([repr(v) if isinstance(v, float) else v for v in r])


def cmd_evaluate(cfg: ExperimentConfig, data_dir: Path, out: Path, checkpoints: list[Path]):
    files = load_data_dir(data_dir)
    _check_consistent(cfg, files)
    out.mkdir(parents=True, exist_ok=True)
    if not all(t is not None for t in files.truths):
        log.warning("ground truth missing; writing predictions only")
    reports = []
    for r, path in enumerate(checkpoints):
        rows, effects = evaluate_model(cfg, _load_checkpoint(path), files)
        suffix = "" if len(checkpoints) == 1 else f"_replicate_{r}"
        _write_csv(out / f"effects{suffix}.csv", _EFFECT_COLS, effects)
        if rows:
            _write_csv(out / f"metrics{suffix}.csv", _METRIC_COLS, rows)
        reports.append(rows)
    if len(checkpoints) > 1 and reports[0]:
        _write_csv(out / "metrics_summary.csv", *summarize_replicates(reports))
    return reports


def summarize_replicates(reports):
    """Mean and standard error of every metric across replicate reports."""
    header = ["source", "replicates", "sqrt_pehe_mean", "sqrt_pehe_se", "eps_ate_mean", "eps_ate_se"]
    rows = []
    for i, first in enumerate(reports[0]):
        pe = [rep[i][5] for rep in reports]
        ea = [rep[i][4] for rep in reports]
        rows.append([first[0], len(reports), *metrics.mean_se(pe), *metrics.mean_se(ea)])
    return header, rows


def bounds_table(cfg: ExperimentConfig):
    bc = cfg.bounds
    header = ["m", "B", "d_x", "sigma", "n", "factor", "latent", "propensity", "outcome",
              "latent_binary", "outcome_binary"]
    rows = []
    for m in bc.m_values:
        for B in bc.B_values:
            for n in bc.n_values:
                for f in bc.factor_values:
                    F = np.full((m, m), float(f))
                    ns = [n] * m
                    rows.append([m, B, bc.d_x, float(bc.sigma), n, float(f),
                                 metrics.minimax_bound_latent(m, B, bc.d_x, ns, F),
                                 metrics.minimax_bound_propensity(m, ns, F),
                                 metrics.minimax_bound_outcome(m, B, bc.sigma, ns, F),
                                 metrics.minimax_bound_latent(m, B, bc.d_x, ns, F, binary=True),
                                 metrics.minimax_bound_outcome(m, B, bc.sigma, ns, F, binary=True)])
    return header, rows


def cmd_bounds(cfg: ExperimentConfig, out: Path) -> Path:
    out.mkdir(parents=True, exist_ok=True)
    _write_csv(out / "bounds.csv", *bounds_table(cfg))
    return out / "bounds.csv"


# ---------------------------------------------------------------------------
# entry point


def build_parser() -> argparse.ArgumentParser:
    epilog = ("Configuration is one JSON object; omitted keys take these defaults:\n"
              + describe_defaults())
    common = _Parser(add_help=False)
    common.add_argument("--config", type=Path, help="experiment configuration JSON")
    common.add_argument("--seed", type=int, help="override the configuration seed")
    common.add_argument("--out", type=Path, help="output directory (overrides out_dir)")
    common.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    p = _Parser(prog="causalrff", description="Federated causal effect estimation with random "
                "Fourier features.", epilog=epilog, formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    sub.add_parser("generate", parents=[common], help="write a synthetic benchmark to <out>/data")
    tr = sub.add_parser("train", parents=[common], help="federated training on <data>")
    tr.add_argument("--data", type=Path, help="data directory (default <out>/data)")
    tr.add_argument("--transport", choices=[t for t in TRANSPORTS], help="override transport")
    tr.add_argument("--listen", help="server host:port for the tcp transport")
    tr.add_argument("--checkpoint", type=Path, help="checkpoint path (default <out>/checkpoint.json)")
    ev = sub.add_parser("evaluate", parents=[common], help="effects and metrics from checkpoint(s)")
    ev.add_argument("--data", type=Path, help="data directory (default <out>/data)")
    ev.add_argument("--checkpoint", type=Path, action="append",
                    help="checkpoint to evaluate; repeat to aggregate replicates")
    sub.add_parser("bounds", parents=[common], help="tabulate the minimax bounds")
    return p


def _resolve(args) -> tuple[ExperimentConfig, Path]:
    cfg = ExperimentConfig.load(args.config) if args.config else ExperimentConfig()
    if args.seed is not None:
        cfg.seed = args.seed
    if getattr(args, "transport", None):
        cfg.transport = args.transport
    if getattr(args, "listen", None):
        cfg.listen = args.listen
    if args.out is not None:
        cfg.out_dir = str(args.out)
    cfg.validate()
    out = Path(cfg.out_dir)
    return cfg, out


def run(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        cfg, out = _resolve(args)
        out.mkdir(parents=True, exist_ok=True)
        cfg.save(out / f"config_{args.command}.json")
        data = getattr(args, "data", None) or out / "data"
        if args.command == "generate":
            cmd_generate(cfg, out)
        elif args.command == "train":
            cmd_train(cfg, data, out, args.checkpoint or out / "checkpoint.json")
        elif args.command == "evaluate":
            cmd_evaluate(cfg, data, out, args.checkpoint or [out / "checkpoint.json"])
        else:
            cmd_bounds(cfg, out)
    except (ParameterError, ShapeError, DomainError, IngestionError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except (CausalRFFError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


def main() -> None:  # pragma: no cover
    sys.exit(run())


if __name__ == "__main__":  # pragma: no cover
    main()
