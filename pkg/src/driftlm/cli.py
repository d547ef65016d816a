"""Batch experiment orchestration.

``driftlm run <config.json>`` drives four cached stages (stream,
pretrain, evaluate, report) under one output directory; every artifact
embeds the config digest. ``driftlm compare <dirs...>`` builds
cross-algorithm tables and plots from completed runs, and
``driftlm eval <checkpoint> <suite.json>`` scores an existing checkpoint
on a task suite.

Exit codes: 0 success, 1 config/validation error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict
from pathlib import Path

import numpy as np

from .corpus import (
    DomainStream,
    build_stream,
    dirichlet_topic_specs,
    drifting_topic_specs,
    load_corpus,
    save_corpus,
    synth_domain_corpus,
)
from .distill import DistillConfig
from .evaluation import (
    FinetuneConfig,
    kshot_curve,
    mlm_log_perplexity,
    retention_matrix,
    synth_downstream_task,
    temporal_generalization,
)
from .model import ModelConfig, load_checkpoint, read_checkpoint, write_checkpoint
from .training import TrainConfig, cost_closed_form, run_stream, verify_ledger

STAGES = ("stream", "pretrain", "evaluate", "report")


class ConfigError(Exception):
    pass


def _digest(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True, default=str).encode()).hexdigest()[:16]


def _atomic_write(path: Path, text: str) -> None:
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(text)
    tmp.replace(path)


def _write_json(path: Path, obj) -> None:
    _atomic_write(path, json.dumps(obj, indent=2, sort_keys=True, default=str) + "\n")


def _write_jsonl(path: Path, records) -> None:
    _atomic_write(path, "".join(json.dumps(r, sort_keys=True) + "\n" for r in records))


# ---------------------------------------------------------------------------
# Config parsing and validation (everything validated before any output)
# ---------------------------------------------------------------------------

def _require(section: dict, field: str, context: str):
    if field not in section:
        raise ConfigError(f"{context}.{field}: missing required field")
    return section[field]


def _build_section(cls, section: dict, context: str):
    try:
        return cls(**section)
    except TypeError as exc:
        raise ConfigError(f"{context}: {exc}") from exc
    except ValueError as exc:
        raise ConfigError(f"{context}: {exc}") from exc


class ExperimentConfig:
    """Validated experiment description; digest covers every knob."""

    TOP_KEYS = {"name", "seed", "out_dir", "stream", "model", "train", "distill", "evaluation"}

    def __init__(self, raw: dict, path: str = "<config>"):
        unknown = set(raw) - self.TOP_KEYS
        if unknown:
            raise ConfigError(f"{path}: unknown top-level keys {sorted(unknown)}")
        self.name = raw.get("name", "experiment")
        self.seed = int(raw.get("seed", 0))
        self.out_dir = raw.get("out_dir")
        self.raw = raw

        stream = dict(_require(raw, "stream", "config"))
        self.stream_kind = _require(stream, "kind", "stream")
        if self.stream_kind not in ("domain-incremental", "chronological"):
            raise ConfigError(f"stream.kind: unknown value {self.stream_kind!r}")
        self.n_domains = int(stream.get("n_domains", 2))
        if self.n_domains < 2:
            raise ConfigError("stream.n_domains: must be >= 2")
        self.stream_params = {
            "vocab_size": int(stream.get("vocab_size", 1024)),
            "subset_size": int(stream.get("subset_size", 128)),
            "n_topics": int(stream.get("n_topics", 4)),
            "dirichlet_alpha": float(stream.get("dirichlet_alpha", 0.3)),
        }
        self.overlap_fraction = float(stream.get("overlap_fraction", 0.05))
        self.drift = float(stream.get("drift", 0.2))
        self.n_train = int(stream.get("n_train", 4096))
        self.n_heldout = stream.get("n_heldout")
        self.max_len = int(stream.get("max_len", 32))

        model = dict(raw.get("model", {}))
        model.setdefault("vocab_size", self.stream_params["vocab_size"])
        if model["vocab_size"] < self.stream_params["vocab_size"]:
            raise ConfigError("model.vocab_size: smaller than stream vocab_size")
        self.model = _build_section(ModelConfig, model, "model")
        if self.model.max_seq_len < self.max_len:
            raise ConfigError("model.max_seq_len: smaller than stream max_len")

        distill = raw.get("distill")
        self.distill = _build_section(DistillConfig, dict(distill), "distill") if distill else None

        train = dict(raw.get("train", {}))
        train.setdefault("seed", self.seed)
        if self.distill is not None:
            train["distill"] = self.distill
        self.train = _build_section(TrainConfig, train, "train")

        needed = self.train.steps_for_domain(1) * self.train.effective_batch_size
        needed_later = self.train.steps_for_domain(2) * self.train.effective_batch_size
        if self.n_train < max(needed, needed_later):
            raise ConfigError(
                f"stream.n_train: {self.n_train} sequences cannot cover "
                f"{max(needed, needed_later)} single-epoch draws"
            )

        evaluation = dict(raw.get("evaluation", {}))
        tasks = dict(evaluation.get("tasks", {}))
        self.task_kind = tasks.get("kind", "single")
        self.task_n_labels = int(tasks.get("n_labels", min(4, self.stream_params["n_topics"])))
        self.task_n_per_label = int(tasks.get("n_per_label", 32))
        self.task_n_per_label_eval = int(tasks.get("n_per_label_eval", 64))
        self.task_max_len = int(tasks.get("max_len", self.max_len))
        self.task_seed = int(tasks.get("task_seed", self.seed))
        if self.task_max_len > self.model.max_seq_len:
            raise ConfigError("evaluation.tasks.max_len: exceeds model.max_seq_len")
        self.ft = _build_section(FinetuneConfig, dict(evaluation.get("finetune", {})), "evaluation.finetune")
        self.eval_seeds = tuple(int(s) for s in evaluation.get("seeds", (0, 1, 2)))
        self.shot_grid = evaluation.get("shot_grid")
        self.ppl_mask_seed = int(evaluation.get("perplexity_mask_seed", 0x5EED))

    def digest(self) -> str:
        return _digest({"seed": self.seed, "raw": self.raw})

    def stage_digest(self, stage: str) -> str:
        chain = {
            "stream": {
                "kind": self.stream_kind, "n_domains": self.n_domains,
                "params": self.stream_params, "overlap": self.overlap_fraction,
                "drift": self.drift, "n_train": self.n_train, "n_heldout": self.n_heldout,
                "max_len": self.max_len, "seed": self.seed,
            },
        }
        chain["pretrain"] = {
            "stream": _digest(chain["stream"]), "model": asdict(self.model),
            "train": asdict(self.train),
        }
        chain["evaluate"] = {
            "pretrain": _digest(chain["pretrain"]),
            "tasks": [self.task_kind, self.task_n_labels, self.task_n_per_label,
                      self.task_n_per_label_eval, self.task_max_len, self.task_seed],
            "ft": asdict(self.ft), "seeds": self.eval_seeds,
            "shots": self.shot_grid, "ppl_seed": self.ppl_mask_seed,
        }
        chain["report"] = {"evaluate": _digest(chain["evaluate"])}
        return _digest(chain[stage])


def load_experiment_config(path: str | Path) -> ExperimentConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        raw = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON at line {exc.lineno}, column {exc.colno}: {exc.msg}")
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: top level must be an object")
    return ExperimentConfig(raw, str(path))


# ---------------------------------------------------------------------------
# Stage machinery
# ---------------------------------------------------------------------------

class StageRunner:
    def __init__(self, config: ExperimentConfig, out_dir: Path, force: bool, jobs: int = 1):
        self.config = config
        self.out = out_dir
        self.force = force
        self.jobs = jobs
        (self.out / "manifests").mkdir(parents=True, exist_ok=True)

    def manifest_path(self, stage: str) -> Path:
        return self.out / "manifests" / f"{stage}.json"

    def is_cached(self, stage: str) -> bool:
        path = self.manifest_path(stage)
        if self.force or not path.exists():
            return False
        manifest = json.loads(path.read_text())
        if manifest.get("input_digest") != self.config.stage_digest(stage):
            return False
        return all((self.out / rel).exists() for rel in manifest.get("outputs", []))

    def finish(self, stage: str, outputs: list[str]) -> None:
        _write_json(
            self.manifest_path(stage),
            {
                "stage": stage,
                "input_digest": self.config.stage_digest(stage),
                "config_digest": self.config.digest(),
                "outputs": outputs,
            },
        )

    # -- stage: stream -------------------------------------------------------

    def domain_ids(self) -> list[str]:
        prefix = "domain" if self.config.stream_kind == "domain-incremental" else "year"
        return [f"{prefix}{i}" for i in range(1, self.config.n_domains + 1)]

    def build_stream(self) -> DomainStream:
        cfg = self.config
        ids = self.domain_ids()
        if cfg.stream_kind == "domain-incremental":
            specs = dirichlet_topic_specs(
                ids, cfg.stream_params["vocab_size"], cfg.stream_params["subset_size"],
                cfg.stream_params["n_topics"], cfg.overlap_fraction, seed=cfg.seed,
                dirichlet_alpha=cfg.stream_params["dirichlet_alpha"],
            )
        else:
            specs = drifting_topic_specs(
                ids, cfg.stream_params["vocab_size"], cfg.stream_params["subset_size"],
                cfg.stream_params["n_topics"], cfg.drift, seed=cfg.seed,
                dirichlet_alpha=cfg.stream_params["dirichlet_alpha"],
            )
        corpora = [
            synth_domain_corpus(s, cfg.n_train, cfg.n_heldout, cfg.max_len) for s in specs
        ]
        return build_stream(corpora, cfg.stream_kind)

    def stage_stream(self) -> DomainStream:
        stream_dir = self.out / "stream"
        if self.is_cached("stream"):
            print("stage stream: skipped (cached)")
            corpora = [load_corpus(stream_dir, d) for d in self.domain_ids()]
            return build_stream(corpora, self.config.stream_kind)
        print("stage stream: building corpora")
        stream = self.build_stream()
        stream_dir.mkdir(parents=True, exist_ok=True)
        outputs = []
        for corpus in stream.domains:
            save_corpus(corpus, stream_dir)
            outputs += [f"stream/{corpus.domain_id}.{suffix}" for suffix in ("train.txt", "heldout.txt", "meta.json")]
        _write_json(stream_dir / "stream.json", {
            "ordering_kind": stream.ordering_kind,
            "domain_ids": [d.domain_id for d in stream.domains],
            "config_digest": self.config.digest(),
        })
        outputs.append("stream/stream.json")
        self.finish("stream", outputs)
        return stream

    # -- stage: pretrain -----------------------------------------------------

    def checkpoint_paths(self) -> list[Path]:
        ckpt_dir = self.out / "checkpoints"
        if self.config.train.algorithm == "task_specific":
            steps = range(1, self.config.n_domains + 1)
        elif self.config.train.algorithm == "mtl":
            steps = [self.config.n_domains]
        else:
            steps = range(1, self.config.n_domains + 1)
        return [ckpt_dir / f"f{t}.ckpt" for t in steps]

    def stage_pretrain(self, stream: DomainStream):
        paths = self.checkpoint_paths()
        if self.is_cached("pretrain"):
            print("stage pretrain: skipped (cached)")
            return [read_checkpoint(p) for p in paths]
        print(f"stage pretrain: algorithm={self.config.train.algorithm}")
        result = run_stream(stream, self.config.model, self.config.train)
        (self.out / "checkpoints").mkdir(parents=True, exist_ok=True)
        (self.out / "logs").mkdir(parents=True, exist_ok=True)
        for ckpt, path in zip(result.checkpoints, paths):
            write_checkpoint(ckpt, path)
        digest = self.config.digest()
        _write_jsonl(self.out / "logs" / "train_log.jsonl",
                     [{**r, "config_digest": digest} for r in result.logs])
        ledger = result.ledger.to_dict()
        ledger["config_digest"] = digest
        k, kp = self.config.train.replay_every, self.config.train.distill_every
        b = (self.config.n_domains - 1) * self.config.train.steps_later_domain
        if self.config.train.algorithm not in ("task_specific", "mtl") and self.config.n_domains >= 2:
            expected = cost_closed_form(
                self.config.train.algorithm, k, kp, b,
                simcse=self.config.train.simcse, steps_multiplier=self.config.train.steps_multiplier,
            )
            check = verify_ledger(result.ledger, expected)
            ledger["closed_form"] = {"forward": expected.forward, "backward": expected.backward}
            ledger["matches_closed_form"] = check.ok
            if not check.ok:
                print(check.report, file=sys.stderr)
        _write_json(self.out / "logs" / "ledger.json", ledger)
        _write_jsonl(
            self.out / "logs" / "access_log.jsonl",
            [
                {"domain": r.domain_id, "split": r.split, "stage": r.stage, "current": r.current_domain}
                for r in result.access_log.records
            ],
        )
        violations = result.access_log.pretraining_violations()
        if violations:
            raise RuntimeError(f"storage-constraint violations during pretraining: {violations[:5]}")
        outputs = [str(p.relative_to(self.out)) for p in paths]
        outputs += ["logs/train_log.jsonl", "logs/ledger.json", "logs/access_log.jsonl"]
        self.finish("pretrain", outputs)
        return [read_checkpoint(p) for p in paths]

    # -- stage: evaluate -----------------------------------------------------

    def build_tasks(self, stream: DomainStream):
        cfg = self.config
        return [
            (t, synth_downstream_task(
                domain, cfg.task_kind, cfg.task_n_labels, cfg.task_n_per_label,
                seed=cfg.task_seed, n_per_label_eval=cfg.task_n_per_label_eval,
                max_len=cfg.task_max_len,
            ))
            for t, domain in enumerate(stream.domains, start=1)
        ]

    def stage_evaluate(self, stream: DomainStream, checkpoints):
        eval_dir = self.out / "eval"
        if self.is_cached("evaluate"):
            print("stage evaluate: skipped (cached)")
            return json.loads((eval_dir / "summary.json").read_text())
        print(f"stage evaluate: {len(self.config.eval_seeds)} seeds, jobs={self.jobs}")
        cfg = self.config
        eval_dir.mkdir(parents=True, exist_ok=True)
        tasks = self.build_tasks(stream)

        if self.jobs > 1:
            with ProcessPoolExecutor(max_workers=self.jobs) as pool:
                matrix = retention_matrix(checkpoints, tasks, cfg.ft, cfg.eval_seeds, job_map=pool.map)
        else:
            matrix = retention_matrix(checkpoints, tasks, cfg.ft, cfg.eval_seeds)

        records = []
        digest = cfg.digest()
        for (step, task_id), stats in sorted(matrix.cells.items()):
            ckpt = next(c for c in checkpoints if c.time_step == step)
            for seed, value in zip(cfg.eval_seeds, stats.scores):
                records.append({
                    "record": "retention", "checkpoint_digest": ckpt.digest,
                    "checkpoint_step": step, "task_id": task_id, "seed": seed,
                    "metric": tasks[0][1].metric,
                    "value": value, "config_digest": digest,
                })

        perplexities = {}
        for ckpt in checkpoints:
            model = load_checkpoint(ckpt)
            for t, domain in enumerate(stream.domains, start=1):
                if domain.domain_id in model.adapters.keys():
                    model.set_active_adapter(domain.domain_id)
                elif domain.domain_id in model.expansions.keys():
                    model.set_active_expansion(domain.domain_id)
                ppl = mlm_log_perplexity(model, domain.heldout, cfg.ppl_mask_seed)
                perplexities[f"f{ckpt.time_step}/{domain.domain_id}"] = ppl
                records.append({
                    "record": "mlm_log_perplexity", "checkpoint_digest": ckpt.digest,
                    "checkpoint_step": ckpt.time_step, "task_id": f"mlm/{domain.domain_id}",
                    "seed": cfg.ppl_mask_seed, "metric": "log_perplexity",
                    "value": ppl, "config_digest": digest,
                })
                if model.active_kind is not None:
                    model.set_active_adapter(None)

        temporal = {}
        if stream.ordering_kind == "chronological" and len(checkpoints) >= 2:
            final = checkpoints[-1]
            last_t, last_task = tasks[-1]
            for t, task in tasks[:-1]:
                stats = temporal_generalization(final, task, last_task, cfg.ft, cfg.eval_seeds)
                temporal[f"{t}->{last_t}"] = {"mean": stats.mean, "std": stats.std}
                for seed, value in zip(cfg.eval_seeds, stats.scores):
                    records.append({
                        "record": "temporal_generalization", "checkpoint_digest": final.digest,
                        "checkpoint_step": final.time_step, "task_id": f"{task.task_id}->{last_task.task_id}",
                        "seed": seed, "metric": task.metric, "value": value, "config_digest": digest,
                    })

        kshot = []
        if cfg.shot_grid:
            final = checkpoints[-1]
            last_t, last_task = tasks[-1]
            shots = [len(last_task.train) if s == "full" else int(s) for s in cfg.shot_grid]
            for point in kshot_curve(final, last_task, shots, cfg.ft, cfg.eval_seeds):
                kshot.append({"shots": point.shots, "mean": point.mean, "std": point.std})
                for seed, value in zip(cfg.eval_seeds, point.scores):
                    records.append({
                        "record": "kshot", "checkpoint_digest": final.digest,
                        "checkpoint_step": final.time_step, "task_id": f"{last_task.task_id}@{point.shots}",
                        "seed": seed, "metric": last_task.metric, "value": value, "config_digest": digest,
                    })

        summary = {
            "config_digest": digest,
            "name": cfg.name,
            "algorithm": cfg.train.algorithm,
            "ordering_kind": stream.ordering_kind,
            "task_metric": tasks[0][1].metric,
            "task_steps": {task.task_id: t for t, task in tasks},
            "retention": {
                f"f{step}|{task_id}": {"mean": s.mean, "std": s.std}
                for (step, task_id), s in sorted(matrix.cells.items())
            },
            "perplexity": perplexities,
            "temporal_generalization": temporal,
            "kshot": kshot,
            "ledger": json.loads((self.out / "logs" / "ledger.json").read_text())
            if (self.out / "logs" / "ledger.json").exists() else None,
        }
        _write_jsonl(eval_dir / "report.jsonl", records)
        _write_json(eval_dir / "summary.json", summary)
        self.finish("evaluate", ["eval/report.jsonl", "eval/summary.json"])
        return summary

    # -- stage: report -------------------------------------------------------

    def stage_report(self, summary: dict):
        plots_dir = self.out / "plots"
        if self.is_cached("report"):
            print("stage report: skipped (cached)")
            return
        print("stage report: rendering plots and tables")
        plots_dir.mkdir(parents=True, exist_ok=True)
        plot_retention(summary, plots_dir / "retention.png", label=summary["algorithm"])
        plot_perplexity(summary, plots_dir / "perplexity.png")
        table = render_summary_table(summary)
        _atomic_write(self.out / "summary_table.txt", table)
        print(table)
        self.finish("report", ["plots/retention.png", "plots/perplexity.png", "summary_table.txt"])


# ---------------------------------------------------------------------------
# Plots and tables
# ---------------------------------------------------------------------------

def _matplotlib():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    return plt


def _retention_series(summary: dict) -> dict[str, tuple[list[int], list[float], list[float]]]:
    series: dict[str, tuple[list[int], list[float], list[float]]] = {}
    for key, stats in summary["retention"].items():
        step_part, task_id = key.split("|", 1)
        step = int(step_part[1:])
        xs, ys, errs = series.setdefault(task_id, ([], [], []))
        xs.append(step)
        ys.append(stats["mean"])
        errs.append(stats["std"])
    return series


def plot_retention(summary: dict, path: Path, label: str) -> str:
    plt = _matplotlib()
    series = _retention_series(summary)
    fig, axes = plt.subplots(1, len(series), figsize=(4 * len(series), 3), squeeze=False)
    for ax, (task_id, (xs, ys, errs)) in zip(axes[0], sorted(series.items())):
        order = np.argsort(xs)
        ax.errorbar([xs[i] for i in order], [ys[i] for i in order],
                    yerr=[errs[i] for i in order], marker="o", capsize=3, label=label)
        ax.set_title(task_id, fontsize=8)
        ax.set_xlabel("pretraining step t")
        ax.set_ylabel(summary["task_metric"])
        ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return str(path)


def plot_perplexity(summary: dict, path: Path) -> str:
    plt = _matplotlib()
    by_domain: dict[str, tuple[list[int], list[float]]] = {}
    for key, value in summary["perplexity"].items():
        step_part, domain = key.split("/", 1)
        xs, ys = by_domain.setdefault(domain, ([], []))
        xs.append(int(step_part[1:]))
        ys.append(value)
    fig, ax = plt.subplots(figsize=(5, 3.2))
    for domain, (xs, ys) in sorted(by_domain.items()):
        order = np.argsort(xs)
        ax.plot([xs[i] for i in order], [ys[i] for i in order], marker="o", label=domain)
    ax.set_xlabel("pretraining step t")
    ax.set_ylabel("MLM log perplexity (nats)")
    ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return str(path)


def render_summary_table(summary: dict) -> str:
    lines = [
        f"run: {summary['name']}  algorithm: {summary['algorithm']}  digest: {summary['config_digest']}",
        "",
        f"{'cell':<40} {'mean':>10} {'std':>8}",
    ]
    for key, stats in sorted(summary["retention"].items()):
        lines.append(f"{key:<40} {stats['mean']:>10.4f} {stats['std']:>8.4f}")
    lines.append("")
    for key, value in sorted(summary["perplexity"].items()):
        lines.append(f"{'mlm ' + key:<40} {value:>10.4f}")
    if summary.get("temporal_generalization"):
        lines.append("")
        for key, stats in sorted(summary["temporal_generalization"].items()):
            lines.append(f"{'temporal ' + key:<40} {stats['mean']:>10.4f} {stats['std']:>8.4f}")
    ledger = summary.get("ledger")
    if ledger:
        lines.append("")
        lines.append(
            f"{'passes: forward/backward/total':<40} "
            f"{ledger['forward_total']:>10d} {ledger['backward_total']:>8d} {ledger['total']:>8d}"
        )
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def cmd_run(args) -> int:
    config = load_experiment_config(args.config)
    if args.seed is not None:
        raw = dict(config.raw)
        raw["seed"] = args.seed
        config = ExperimentConfig(raw, str(args.config))
    out_dir = Path(args.out or os.environ.get("DRIFTLM_OUT") or config.out_dir or f"runs/{config.name}")
    runner = StageRunner(config, out_dir, force=args.force, jobs=args.jobs)
    _write_json(out_dir / "config.json", {**config.raw, "digest": config.digest()})
    stream = runner.stage_stream()
    checkpoints = runner.stage_pretrain(stream)
    summary = runner.stage_evaluate(stream, checkpoints)
    runner.stage_report(summary)
    print(f"run complete: {out_dir}")
    return 0


def _load_run_summary(run_dir: Path) -> dict:
    summary_path = run_dir / "eval" / "summary.json"
    if not summary_path.exists():
        raise ConfigError(f"{run_dir}: not a completed run (missing eval/summary.json)")
    summary = json.loads(summary_path.read_text())
    if not summary.get("config_digest"):
        raise ConfigError(f"{run_dir}: summary carries no config digest; refusing to compare")
    return summary


def cmd_compare(args) -> int:
    if len(args.run_dirs) < 2:
        raise ConfigError("compare needs at least 2 run directories")
    summaries = [_load_run_summary(Path(d)) for d in args.run_dirs]
    task_sets = [set(s["task_steps"]) or set() for s in summaries]
    base = {t.split("/", 1)[0] for t in task_sets[0]}
    for s, tasks in zip(summaries[1:], task_sets[1:]):
        domains = {t.split("/", 1)[0] for t in tasks}
        if domains != base:
            raise ConfigError(
                f"incompatible task suites: {sorted(base)} vs {sorted(domains)} "
                f"({summaries[0]['name']} vs {s['name']})"
            )

    out_dir = Path(args.out or os.environ.get("DRIFTLM_OUT") or "comparison")
    out_dir.mkdir(parents=True, exist_ok=True)

    plt = _matplotlib()
    all_series = [(s["algorithm"], _retention_series(s)) for s in summaries]
    task_ids = sorted({t for _, series in all_series for t in series})
    fig, axes = plt.subplots(1, len(task_ids), figsize=(4 * len(task_ids), 3), squeeze=False)
    for ax, task_id in zip(axes[0], task_ids):
        for algorithm, series in all_series:
            if task_id not in series:
                continue
            xs, ys, errs = series[task_id]
            order = np.argsort(xs)
            ax.errorbar([xs[i] for i in order], [ys[i] for i in order],
                        yerr=[errs[i] for i in order], marker="o", capsize=3, label=algorithm)
        ax.set_title(task_id, fontsize=8)
        ax.set_xlabel("pretraining step t")
        ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(out_dir / "comparison.png", dpi=120)
    plt.close(fig)

    lines = [f"{'algorithm':<18} {'cell':<40} {'mean':>10} {'std':>8}"]
    for summary in summaries:
        for key, stats in sorted(summary["retention"].items()):
            lines.append(f"{summary['algorithm']:<18} {key:<40} {stats['mean']:>10.4f} {stats['std']:>8.4f}")
    lines.append("")
    lines.append(f"{'algorithm':<18} {'forward':>10} {'backward':>10} {'total':>10}")
    for summary in summaries:
        ledger = summary.get("ledger") or {}
        lines.append(
            f"{summary['algorithm']:<18} {ledger.get('forward_total', 0):>10d} "
            f"{ledger.get('backward_total', 0):>10d} {ledger.get('total', 0):>10d}"
        )
    # forgetting deltas per earliest-domain task
    lines.append("")
    lines.append(f"{'algorithm':<18} {'task':<40} {'delta(first)':>12}")
    for summary in summaries:
        series = _retention_series(summary)
        for task_id, (xs, ys, _) in sorted(series.items()):
            if len(xs) < 2:
                continue
            first = ys[int(np.argmin(xs))]
            last = ys[int(np.argmax(xs))]
            lines.append(f"{summary['algorithm']:<18} {task_id:<40} {first - last:>12.4f}")
    table = "\n".join(lines) + "\n"
    _atomic_write(out_dir / "comparison.txt", table)
    print(table)
    print(f"comparison written to {out_dir}")
    return 0


def cmd_eval(args) -> int:
    ckpt = read_checkpoint(args.checkpoint)
    suite_path = Path(args.suite)
    if not suite_path.exists():
        raise ConfigError(f"task suite not found: {suite_path}")
    suite = json.loads(suite_path.read_text())
    stream_dir = Path(_require(suite, "stream_dir", "suite"))
    domain_ids = _require(suite, "domains", "suite")
    tasks_cfg = suite.get("tasks", {})
    ft = _build_section(FinetuneConfig, dict(suite.get("finetune", {})), "suite.finetune")
    seeds = (args.seed,) if args.seed is not None else tuple(suite.get("seeds", [0, 1, 2]))

    records = []
    for domain_id in domain_ids:
        corpus = load_corpus(stream_dir, domain_id)
        task = synth_downstream_task(
            corpus,
            tasks_cfg.get("kind", "single"),
            int(tasks_cfg.get("n_labels", 4)),
            int(tasks_cfg.get("n_per_label", 32)),
            seed=int(tasks_cfg.get("task_seed", 0)),
            n_per_label_eval=int(tasks_cfg.get("n_per_label_eval", 64)),
            max_len=int(tasks_cfg.get("max_len", 32)),
        )
        from .evaluation import finetune

        for seed in seeds:
            result = finetune(ckpt, task, ft, seed)
            records.append({
                "checkpoint_digest": ckpt.digest, "checkpoint_step": ckpt.time_step,
                "task_id": task.task_id, "seed": seed, "metric": task.metric,
                "value": result.test_score,
            })
            print(f"{task.task_id} seed={seed}: {result.test_score:.4f}")
    if args.out:
        _write_jsonl(Path(args.out), records)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="driftlm", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run a full experiment from a JSON config")
    run.add_argument("config")
    run.add_argument("--out", default=None, help="output directory (env DRIFTLM_OUT overrides config)")
    run.add_argument("--seed", type=int, default=None, help="override the config's global seed")
    run.add_argument("--force", action="store_true", help="rerun stages even if cached")
    run.add_argument("--jobs", type=int, default=1, help="parallel fine-tuning jobs in evaluation")
    run.set_defaults(fn=cmd_run)

    compare = sub.add_parser("compare", help="compare completed runs")
    compare.add_argument("run_dirs", nargs="+")
    compare.add_argument("--out", default=None)
    compare.set_defaults(fn=cmd_compare)

    evaluate = sub.add_parser("eval", help="score a checkpoint on a task suite")
    evaluate.add_argument("checkpoint")
    evaluate.add_argument("suite")
    evaluate.add_argument("--seed", type=int, default=None)
    evaluate.add_argument("--out", default=None)
    evaluate.set_defaults(fn=cmd_eval)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        print(f"runtime error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
