"""Annotate a trained zoo with loss-landscape metrics (one ``metrics.json`` per cell)."""

from __future__ import annotations

from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass
from pathlib import Path

from threadpoolctl import threadpool_limits

from .landscape import MLPObjective, curvature, pairwise_metrics
from .zoo import GridSpec, ZooManifest, write_json

@dataclass(frozen=True)
class MetricOptions:
    probes: int = 100
    power_iters: int = 100
    power_tol: float = 1e-4
    bezier_steps: int = 2000
    bezier_lr: float = 0.1
    bezier_batch: int | None = 32
    t_grid_size: int = 21
    metric_samples: int | None = None
    mc_argmin: bool = False
    all_checkpoints: bool = False
    seed: int = 0

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "MetricOptions":
        return cls(**d)


def _objective(grid: GridSpec, key_spec, options: MetricOptions) -> MLPObjective:
    data = grid.dataset.build().train
    return MLPObjective(key_spec, data, samples=options.metric_samples, seed=options.seed)


def _group_metrics(root: str, width: int, batch_size: int, options_dict: dict) -> list[str]:
    """Compute and write metrics for all seeds of one (width, batch size) configuration."""
    options = MetricOptions.from_dict(options_dict)
    manifest = ZooManifest.load(root)
    grid = manifest.grid
    entries = [e for e in manifest.entries_for(width, batch_size) if e.status == "done"]
    if not entries:
        return []
    with threadpool_limits(limits=1):
        spec, _, _ = manifest.load_run(entries[0].cell.key)
        objective = _objective(grid, spec, options)
        epoch_lists = [manifest.checkpoint_epochs(e.cell.key) for e in entries]
        final_epochs = [ep[-1] for ep in epoch_lists]
        if options.all_checkpoints:
            epochs = sorted(set.intersection(*(set(ep) for ep in epoch_lists)))
        else:
            epochs = []

        def annotate(epoch_of: list[int]) -> list[dict]:
            params = [manifest.load_params(e.cell.key, ep) for e, ep in zip(entries, epoch_of)]
            out = []
            for e, p in zip(entries, params):
                rep = curvature(objective, p, probes=options.probes, seed=options.seed,
                                max_iters=options.power_iters, tol=options.power_tol)
                out.append({"lambda_max": rep.lambda_max, "lambda_converged": rep.converged,
                            "power_iters": rep.power_iters, "hessian_trace": rep.trace_estimate,
                            "hessian_trace_stderr": rep.to_dict()["trace_stderr"], "probes": rep.probes_used,
                            "train_loss_eval": objective.loss(p.values)})
            if len(params) >= 2:
                pw = pairwise_metrics(params, objective, labels=[e.cell.seed for e in entries],
                                      bezier_steps=options.bezier_steps, bezier_lr=options.bezier_lr,
                                      bezier_batch=options.bezier_batch, t_grid_size=options.t_grid_size,
                                      seed=options.seed, argmin=options.mc_argmin)
                for rec in out:
                    rec.update({"mc_mean": pw.mc_mean, "cka_mean": pw.cka_mean, "pairs": pw.pairs})
            else:
                for rec in out:
                    rec.update({"mc_mean": None, "cka_mean": None, "pairs": []})
            return out

        records = annotate(final_epochs)
        per_epoch = {ep: annotate([ep] * len(entries)) for ep in epochs}

    written = []
    for k, (entry, rec) in enumerate(zip(entries, records)):
        rec["epoch"] = final_epochs[k]
        rec["options"] = options.to_dict()
        if per_epoch:
            rec["epochs"] = {str(ep): per_epoch[ep][k] for ep in epochs}
        write_json(Path(root) / entry.path / "metrics.json", rec)
        written.append(entry.cell.key)
    return written


def compute_metrics(manifest: ZooManifest, options: MetricOptions | None = None, workers: int = 1,
                    overwrite: bool = False) -> ZooManifest:
    """Annotate every completed cell; groups already carrying metrics are skipped unless ``overwrite``."""
    options = options or MetricOptions()
    manifest.refresh()
    grid = manifest.grid
    jobs = []
    for w in grid.widths:
        for b in grid.batch_sizes:
            entries = manifest.entries_for(w, b)
            done = [e for e in entries if e.status == "done"]
            if not done:
                continue
            if not overwrite and all(e.metrics is not None and e.metrics.get("options") == options.to_dict()
                                     for e in done):
                continue
            jobs.append((w, b))
    root = str(manifest.root)
    if workers == 1 or len(jobs) <= 1:
        for w, b in jobs:
            _group_metrics(root, w, b, options.to_dict())
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            list(pool.map(_group_metrics, [root] * len(jobs), [j[0] for j in jobs], [j[1] for j in jobs],
                          [options.to_dict()] * len(jobs)))
    manifest.refresh()
    manifest.save()
    return manifest

