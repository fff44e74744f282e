"""Experiment orchestration: dataset generation, runs, and reporting.

A run executes the full protocol for each configured seed: base
training, per-session incremental calibration and optimization, and
cumulative evaluation. Every seed writes its own directory with a
re-parseable manifest, per-epoch loss history, a results CSV (one row
per session plus a summary row), and a checkpoint. Identical config and
seed reproduce the CSV byte for byte.
"""

from __future__ import annotations

import dataclasses
import os

import numpy as np

from .autodiff import Tensor
from .config import ExperimentConfig, serialize_config
from .frontend import SpectrogramDataset, build_synthetic_dataset, load_dataset, write_dataset
from .nets import ContextEstimator, Embedder, save_checkpoint
from .protocol import MetricSummary, build_sessions, evaluate, metrics
from .training import _eval_embeddings, train_base, train_incremental

RESULTS_NAME = "results.csv"
MANIFEST_NAME = "manifest.txt"
CHECKPOINT_NAME = "checkpoint.ckpt"
CSV_HEADER = "kind,session,cumulative_classes,accuracy,aa,pd,adr"


def gen_dataset(cfg: ExperimentConfig, out_dir: str, force: bool = False) -> str:
    """Materialize the configured synthetic dataset as a directory."""
    if cfg.source != "synthetic":
        raise ValueError("gen only applies to synthetic dataset configs")
    ds = build_synthetic_dataset(cfg.synth)
    write_dataset(out_dir, ds, cfg.synth, force=force)
    return out_dir


def _load_for_run(cfg: ExperimentConfig) -> SpectrogramDataset:
    if cfg.source == "synthetic":
        return build_synthetic_dataset(cfg.synth)
    return load_dataset(cfg.source, cfg.mel)


def _format_results(accs, summary: MetricSummary, ledger) -> str:
    lines = [CSV_HEADER]
    for session, acc in enumerate(accs):
        n_classes = len(ledger.classes_up_to(session))
        lines.append(f"session,{session},{n_classes},{acc!r},,,")
    adr = "" if summary.average_drop_rate is None else repr(summary.average_drop_rate)
    lines.append(f"summary,,,,{summary.average_accuracy!r},"
                 f"{summary.performance_drop!r},{adr}")
    return "\n".join(lines) + "\n"


def parse_results(path: str):
    """Read a results CSV back into (accuracies, summary)."""
    accs, summary = [], None
    with open(path) as fh:
        header = fh.readline().strip()
        if header != CSV_HEADER:
            raise ValueError(f"{path}: unexpected results schema {header!r}")
        for line in fh:
            parts = line.rstrip("\n").split(",")
            if parts[0] == "session":
                accs.append(float(parts[3]))
            elif parts[0] == "summary":
                adr = float(parts[6]) if parts[6] else None
                summary = MetricSummary(float(parts[4]), float(parts[5]), adr)
    if summary is None:
        raise ValueError(f"{path}: missing summary row")
    return accs, summary


def run_seed(cfg: ExperimentConfig, seed: int, out_dir: str) -> MetricSummary:
    """One full protocol run; writes manifest, results, checkpoint."""
    os.makedirs(out_dir, exist_ok=True)
    ds = _load_for_run(cfg)

    protocol = cfg.protocol
    if cfg.reseed_splits:
        protocol = dataclasses.replace(protocol, seed=protocol.seed + seed)
    ledger = build_sessions(ds.labels, protocol)

    estimator = ContextEstimator(cfg.estimator, cfg.bounds, np.random.default_rng([seed, 11]))
    embedder = Embedder(cfg.embedder, np.random.default_rng([seed, 12]))
    sw = cfg.switches

    base_classes = ledger.session_classes[0]
    base_rows = np.concatenate([ledger.support_indices[c] for c in base_classes])
    result = train_base(ds.spectra[base_rows], ds.labels[base_rows], estimator, embedder,
                        cfg.pretrain, cfg.full_base, cfg.weights, cfg.bounds, cfg.umap,
                        seed=seed, canonicalize_on=sw.canonicalize,
                        consistency_on=sw.consistency)
    records, history = result.records, result.history

    def embeddings_for(rows):
        return _eval_embeddings(estimator, embedder, ds.spectra[rows], sw.canonicalize)

    accs = [evaluate(records, ledger, 0, embeddings_for)]
    for session in range(1, protocol.sessions + 1):
        cls = ledger.session_classes[session]
        rows = np.concatenate([ledger.support_indices[c] for c in cls])
        anchor_lookup = None
        if cfg.anchor == "true_canonical":
            if ds.canonical is None:
                raise ValueError("true_canonical anchor needs a synthetic dataset")
            labels_local = ds.labels[rows]
            anchor_lookup = lambda i: ds.canonical[labels_local[i]]  # noqa: E731
        hist = train_incremental(ds.spectra[rows], ds.labels[rows], session, estimator,
                                 embedder, records, cfg.incremental, cfg.weights,
                                 cfg.umap, cfg.bounds, cfg.n_ucpc, seed=seed,
                                 canonicalize_on=sw.canonicalize,
                                 calibration_on=sw.calibration,
                                 anchor_lookup=anchor_lookup)
        for k, v in hist.items():
            history.setdefault(f"session{session}_{k}", []).extend(v)
        accs.append(evaluate(records, ledger, session, embeddings_for))

    summary = metrics(accs) if len(accs) >= 2 else MetricSummary(accs[0], 0.0, 0.0)

    manifest = serialize_config(cfg)
    manifest += f"\n[result]\nseed = {seed}\n"
    for stage, losses in history.items():
        packed = ",".join(repr(v) for v in losses)
        manifest += f"loss_{stage} = {packed}\n"
    with open(os.path.join(out_dir, MANIFEST_NAME), "w") as fh:
        fh.write(manifest)
    with open(os.path.join(out_dir, RESULTS_NAME), "w") as fh:
        fh.write(_format_results(accs, summary, ledger))

    tensors = {}
    for prefix, module in (("estimator.", estimator), ("embedder.", embedder)):
        for name, arr in module.state_tensors(prefix).items():
            tensors[name] = arr.data if isinstance(arr, Tensor) else arr
    rec_meta = []
    for i, r in enumerate(records):
        tensors[f"record.{i}.mu_raw"] = r.mu_raw
        tensors[f"record.{i}.mu_cal"] = r.mu_cal
        rec_meta.append({"class_id": r.class_id, "session": r.session,
                         "var_cal": r.var_cal, "uncertainty": r.uncertainty})
    descriptor = {"estimator": estimator.descriptor(), "embedder": embedder.descriptor(),
                  "records": rec_meta, "seed": seed}
    save_checkpoint(os.path.join(out_dir, CHECKPOINT_NAME), tensors, descriptor)
    return summary


def run_experiment(cfg: ExperimentConfig, out_dir: str, force: bool = False) -> dict:
    """Run every configured seed; returns {seed: MetricSummary}."""
    if os.path.isdir(out_dir) and os.listdir(out_dir) and not force:
        raise FileExistsError(f"{out_dir} exists and is not empty (use --force)")
    os.makedirs(out_dir, exist_ok=True)
    summaries = {}
    for seed in cfg.seeds:
        sub = os.path.join(out_dir, f"seed_{seed:03d}")
        summaries[seed] = run_seed(cfg, seed, sub)
    _write_seed_means(out_dir, summaries)
    return summaries


def _write_seed_means(out_dir: str, summaries: dict):
    rows = sorted(summaries.items())
    with open(os.path.join(out_dir, "summary.csv"), "w") as fh:
        fh.write("seed,aa,pd,adr\n")
        for seed, s in rows:
            adr = "" if s.average_drop_rate is None else repr(s.average_drop_rate)
            fh.write(f"{seed},{s.average_accuracy!r},{s.performance_drop!r},{adr}\n")
        aas = [s.average_accuracy for _, s in rows]
        pds = [s.performance_drop for _, s in rows]
        fh.write(f"mean,{np.mean(aas)!r},{np.mean(pds)!r},\n")


def _seed_dirs(run_dir: str):
    subs = sorted(d for d in os.listdir(run_dir)
                  if d.startswith("seed_") and os.path.isdir(os.path.join(run_dir, d)))
    if not subs:
        raise ValueError(f"{run_dir} holds no seed_* run directories")
    return [os.path.join(run_dir, d) for d in subs]


def report(run_dirs: list, out_path: str | None = None) -> str:
    """Aligned comparison of runs: per-session means, AA/PD/ADR, deltas.

    Returns the plain-text table; optionally writes it plus a plot-ready
    CSV of accuracy-vs-session curves next to ``out_path``.
    """
    runs = []
    for run_dir in run_dirs:
        per_seed = [parse_results(os.path.join(d, RESULTS_NAME))
                    for d in _seed_dirs(run_dir)]
        lengths = {len(a) for a, _ in per_seed}
        if len(lengths) != 1:
            raise ValueError(f"{run_dir}: inconsistent session counts across seeds")
        accs = np.array([a for a, _ in per_seed])
        aa = np.array([s.average_accuracy for _, s in per_seed])
        pd = np.array([s.performance_drop for _, s in per_seed])
        adr = [s.average_drop_rate for _, s in per_seed]
        runs.append({"name": os.path.basename(os.path.normpath(run_dir)),
                     "accs": accs, "aa": aa, "pd": pd, "adr": adr})

    n_sessions = runs[0]["accs"].shape[1]
    if any(r["accs"].shape[1] != n_sessions for r in runs):
        raise ValueError("runs cover different session counts; cannot align")

    header = (["run", "seeds"] + [f"s{i}" for i in range(n_sessions)]
              + ["AA", "PD", "ADR", "dAA"])
    lines = []
    base_aa = runs[0]["aa"].mean()
    csv_rows = ["run,session,mean_accuracy,std_accuracy"]
    for r in runs:
        mean_acc = r["accs"].mean(axis=0)
        row = [r["name"], str(len(r["aa"]))]
        row += [f"{v:.4f}" for v in mean_acc]
        adr_vals = [v for v in r["adr"] if v is not None]
        row += [f"{r['aa'].mean():.4f}", f"{r['pd'].mean():.4f}",
                f"{np.mean(adr_vals):.4f}" if adr_vals else "n/a",
                f"{r['aa'].mean() - base_aa:+.4f}"]
        lines.append(row)
        for s in range(n_sessions):
            csv_rows.append(f"{r['name']},{s},{mean_acc[s]!r},{r['accs'][:, s].std()!r}")

    widths = [max(len(header[i]), *(len(row[i]) for row in lines))
              for i in range(len(header))]
    fmt = "  ".join(f"{{:<{w}}}" for w in widths)
    text = fmt.format(*header) + "\n"
    text += "\n".join(fmt.format(*row) for row in lines) + "\n"
    if out_path:
        with open(out_path, "w") as fh:
            fh.write(text)
        with open(os.path.splitext(out_path)[0] + "_curves.csv", "w") as fh:
            fh.write("\n".join(csv_rows) + "\n")
    return text
