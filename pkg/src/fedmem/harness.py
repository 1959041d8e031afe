"""Scenario runners, metrics and CSV/manifest output."""

from __future__ import annotations

import csv
import dataclasses
import io
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import __version__
from .config import ExperimentConfig, render_config
from .data import (
    ClientDataset,
    LabeledPool,
    make_drift_scenario,
    make_synthetic_pool,
    partition_with_retry,
    build_clients,
    write_client_file,
)
from .datastore import Datastore, build_datastore, compress, update_with_samples
from .federation import FedConfig, RoundLog, fine_tune, run_fedavg, train_central, train_local
from .nn import Model, init_model, mlp_spec, predict_proba
from .personalize import (
    KernelConfig,
    PersonalizedPredictor,
    accuracy,
    component_posteriors,
    evaluate,
    interpolate,
    lambda_curve,
    tune_lambda,
)
from .samples import Samples
from .seeding import derive_seed, rng_for

DRIFT_EVAL_NOTE = "before t0 each client is scored on the test split of S_m, from t0 on on the test split of S'_m"


# -- metrics ---------------------------------------------------------------


@dataclass(frozen=True)
class MetricsReport:
    accuracies: tuple[float, ...]
    weights: tuple[float, ...]
    weighted_avg: float
    unweighted_avg: float
    bottom_decile: float
    minimum: float
    maximum: float


def metrics(per_client: Sequence[tuple[float, float]]) -> MetricsReport:
    """Weighted average (weights n_m / n) and the ceil(M/10)-th worst accuracy."""
    if not per_client:
        raise ValueError("metrics needs at least one client")
    n = np.array([float(w) for w, _ in per_client])
    acc = np.array([float(a) for _, a in per_client])
    rank = max(1, math.ceil(len(acc) / 10 - 1e-9))
    return MetricsReport(
        accuracies=tuple(acc.tolist()),
        weights=tuple(n.tolist()),
        weighted_avg=float(np.sum(n / n.sum() * acc)),
        unweighted_avg=float(acc.mean()),
        bottom_decile=float(np.sort(acc)[rank - 1]),
        minimum=float(acc.min()),
        maximum=float(acc.max()),
    )


# -- results ---------------------------------------------------------------


@dataclass
class Table:
    header: list[str]
    rows: list[list] = field(default_factory=list)

    def add(self, *row) -> None:
        self.rows.append(list(row))

    def column(self, name: str) -> list:
        i = self.header.index(name)
        return [r[i] for r in self.rows]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.header)
        for row in self.rows:
            w.writerow([_fmt(v) for v in row])
        return buf.getvalue()


def _fmt(v) -> str:
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, (np.integer,)):
        return str(int(v))
    return str(v)


@dataclass
class ScenarioResult:
    scenario: str
    tables: dict[str, Table] = field(default_factory=dict)
    notes: dict[str, str] = field(default_factory=dict)
    # in-memory extras for programmatic callers (not written to disk)
    extras: dict = field(default_factory=dict)


# -- shared building blocks ------------------------------------------------


def build_pool(cfg: ExperimentConfig, seed: int) -> LabeledPool:
    d = cfg.data
    return make_synthetic_pool(
        d.num_classes,
        d.num_coarse,
        d.samples_per_class,
        d.feature_dim,
        derive_seed(seed, "pool"),
        separation=d.separation,
        coarse_separation=d.coarse_separation,
    )


def build_scenario_clients(cfg: ExperimentConfig, seed: int, alpha: float | None = None) -> tuple[LabeledPool, list[ClientDataset]]:
    d = cfg.data
    pool = build_pool(cfg, seed)
    alpha = d.alpha if alpha is None else alpha
    beta = d.beta if d.partitioner == "pachinko" else None
    part = partition_with_retry(
        pool, d.num_clients, alpha, derive_seed(seed, "partition"), beta=beta, min_samples=d.min_client_samples
    )
    return pool, build_clients(pool, part, d.split, derive_seed(seed, "split"))


def model_spec(cfg: ExperimentConfig):
    return mlp_spec([cfg.data.feature_dim, *cfg.model.hidden, cfg.data.num_classes])


def fresh_model(cfg: ExperimentConfig, seed: int) -> Model:
    return init_model(model_spec(cfg), cfg.model.repr_layer, derive_seed(seed, "init"))


def fed_config(cfg: ExperimentConfig, seed: int) -> FedConfig:
    return dataclasses.replace(cfg.fed, seed=derive_seed(seed, "fed"), workers=cfg.run.workers)


def kernel_config(cfg: ExperimentConfig) -> KernelConfig:
    return KernelConfig(cfg.personalize.k, cfg.personalize.sigma)


def train_global(cfg: ExperimentConfig, clients: Sequence[ClientDataset], seed: int) -> tuple[Model, list[RoundLog]]:
    return run_fedavg(clients, fresh_model(cfg, seed), fed_config(cfg, seed))


def split_old_new(M: int, train_fraction: float, seed: int) -> tuple[list[int], list[int]]:
    """Random subset of round(f*M) clients that train; the rest join later."""
    perm = rng_for(seed, "old-new").permutation(M)
    n_old = min(M - 1, max(1, int(round(train_fraction * M))))
    return sorted(int(i) for i in perm[:n_old]), sorted(int(i) for i in perm[n_old:])


@dataclass
class ClientEval:
    client_id: int
    n: int
    lam: float
    val_acc: float
    test_acc: float
    train_acc: float
    global_val_acc: float
    global_test_acc: float
    global_train_acc: float


def personalize_client(
    cfg: ExperimentConfig,
    model: Model,
    client: ClientDataset,
    kernel: KernelConfig | None = None,
    capacity: float = 1.0,
    seed: int = 0,
) -> ClientEval:
    """Build the datastore, tune lambda on val, score test and train splits."""
    kernel = kernel or kernel_config(cfg)
    grid = cfg.personalize.lambda_grid
    store_seed = derive_seed(seed, "store", client.client_id)
    store = build_datastore(model, client.train, capacity, store_seed) if capacity > 0 else None
    lam, val_acc = tune_lambda(model, store, kernel, client.val, grid)
    if cfg.personalize.retrain_on_train_val and capacity > 0:
        store = build_datastore(model, Samples.concat([client.train, client.val]), capacity, store_seed)
    pred = PersonalizedPredictor(model, store, kernel, lam)
    glob = lambda s: accuracy(predict_proba(model, s.X), s.y)
    return ClientEval(
        client.client_id,
        client.n,
        lam,
        val_acc,
        evaluate(pred, client.test),
        evaluate(pred, client.train),
        glob(client.val),
        glob(client.test),
        glob(client.train),
    )


def rounds_table(logs: Sequence[RoundLog], tag: dict | None = None) -> Table:
    tag = tag or {}
    t = Table([*tag.keys(), "round", "participant_count", "global_loss", "lr"])
    for log in logs:
        t.add(*tag.values(), log.round, len(log.participants), log.global_loss, log.lr)
    return t


def _append(table: Table | None, other: Table) -> Table:
    if table is None:
        return other
    table.rows.extend(other.rows)
    return table


def lambda_table(evals: Sequence[ClientEval], group: str | None = None) -> Table:
    cols = ["client_id", "n_m", "lambda_star", "val_acc", "test_acc"]
    t = Table(cols + (["group"] if group is not None else []))
    for e in evals:
        t.add(e.client_id, e.n, e.lam, e.val_acc, e.test_acc, *([group] if group is not None else []))
    return t


METRIC_COLS = ["weighted_avg", "unweighted_avg", "bottom_decile", "min", "max"]


def _metric_values(rep: MetricsReport) -> list[float]:
    return [rep.weighted_avg, rep.unweighted_avg, rep.bottom_decile, rep.minimum, rep.maximum]


# -- scenarios -------------------------------------------------------------


def scenario_compare(cfg: ExperimentConfig) -> ScenarioResult:
    """Local, FedAvg, FedAvg+ and kNN-Per evaluated on identical test splits."""
    seed = cfg.seed
    _, clients = build_scenario_clients(cfg, seed)
    model, logs = train_global(cfg, clients, seed)
    fcfg = fed_config(cfg, seed)
    p = cfg.personalize
    ft_lr = p.finetune_lr if p.finetune_lr is not None else fcfg.final_lr
    local_lr = p.local_lr if p.local_lr is not None else fcfg.lr
    spec = model_spec(cfg)

    per_method: dict[str, list[tuple[int, float]]] = {m: [] for m in ("Local", "FedAvg", "FedAvg+", "kNN-Per")}
    per_client = Table(
        ["client_id", "n_m", "local_test", "fedavg_test", "fedavg_plus_test", "knnper_test", "fedavg_val", "knnper_val", "lambda_star"]
    )
    evals = []
    for c in clients:
        e = personalize_client(cfg, model, c, seed=seed)
        evals.append(e)
        local = train_local(c, spec, p.local_epochs, local_lr, derive_seed(seed, "local"), fcfg.batch_size, cfg.model.repr_layer)
        tuned = fine_tune(model, c, p.finetune_epochs, ft_lr, derive_seed(seed, "finetune"), fcfg.batch_size)
        local_acc = accuracy(predict_proba(local, c.test.X), c.test.y)
        plus_acc = accuracy(predict_proba(tuned, c.test.X), c.test.y)
        for name, acc in (("Local", local_acc), ("FedAvg", e.global_test_acc), ("FedAvg+", plus_acc), ("kNN-Per", e.test_acc)):
            per_method[name].append((c.n, acc))
        per_client.add(c.client_id, c.n, local_acc, e.global_test_acc, plus_acc, e.test_acc, e.global_val_acc, e.val_acc, e.lam)

    table = Table(["method", *METRIC_COLS])
    reports = {}
    for name, rows in per_method.items():
        reports[name] = metrics(rows)
        table.add(name, *_metric_values(reports[name]))
    res = ScenarioResult("compare")
    res.tables = {
        "metrics.csv": table,
        "per_client.csv": per_client,
        "lambda_report.csv": lambda_table(evals),
        "rounds.csv": rounds_table(logs),
    }
    res.extras = {"reports": reports, "evals": evals, "model": model, "clients": clients}
    return res


def scenario_unseen(cfg: ExperimentConfig) -> ScenarioResult:
    """Federate on a fraction of clients; the rest personalize against the frozen model."""
    seed = cfg.seed
    _, clients = build_scenario_clients(cfg, seed)
    old, new = split_old_new(len(clients), cfg.unseen.train_fraction, seed)
    model, logs = train_global(cfg, [clients[i] for i in old], seed)
    table = Table(["group", "method", "split", *METRIC_COLS])
    lam_report = None
    reports = {}
    for group, ids in (("train", old), ("new", new)):
        evals = [personalize_client(cfg, model, clients[i], seed=seed) for i in ids]
        for method, split, attr in (
            ("kNN-Per", "test", "test_acc"),
            ("kNN-Per", "train", "train_acc"),
            ("FedAvg", "test", "global_test_acc"),
            ("FedAvg", "train", "global_train_acc"),
        ):
            rep = metrics([(e.n, getattr(e, attr)) for e in evals])
            reports[(group, method, split)] = rep
            table.add(group, method, split, *_metric_values(rep))
        lam_report = _append(lam_report, lambda_table(evals, group))
    res = ScenarioResult("unseen")
    res.tables = {"metrics.csv": table, "lambda_report.csv": lam_report, "rounds.csv": rounds_table(logs)}
    res.extras = {"reports": reports, "old": old, "new": new}
    return res


def scenario_capacity(cfg: ExperimentConfig) -> ScenarioResult:
    """New clients' accuracy as their datastore shrinks, per heterogeneity level."""
    seed = cfg.seed
    table = Table(["alpha", "capacity", *METRIC_COLS])
    rounds = None
    lam_report = Table(["alpha", "capacity", "client_id", "n_m", "lambda_star", "val_acc", "test_acc"])
    for alpha in cfg.capacity.alphas:
        _, clients = build_scenario_clients(cfg, seed, alpha=alpha)
        old, new = split_old_new(len(clients), cfg.capacity.train_fraction, seed)
        model, logs = train_global(cfg, [clients[i] for i in old], seed)
        rounds = _append(rounds, rounds_table(logs, {"alpha": alpha}))
        for cap in cfg.capacity.capacities:
            evals = [personalize_client(cfg, model, clients[i], capacity=cap, seed=seed) for i in new]
            table.add(alpha, cap, *_metric_values(metrics([(e.n, e.test_acc) for e in evals])))
            for e in evals:
                lam_report.add(alpha, cap, e.client_id, e.n, e.lam, e.val_acc, e.test_acc)
    res = ScenarioResult("capacity_sweep")
    res.tables = {"metrics.csv": table, "lambda_report.csv": lam_report, "rounds.csv": rounds}
    res.notes["capacity_normalization"] = "fraction of each client's training split"
    return res


def scenario_kernel(cfg: ExperimentConfig) -> ScenarioResult:
    """Sweep the neighbor count k (tuned lambda) and the kernel scale sigma (every lambda)."""
    seed = cfg.seed
    _, clients = build_scenario_clients(cfg, seed)
    model, logs = train_global(cfg, clients, seed)
    grid = cfg.personalize.lambda_grid
    stores = [build_datastore(model, c.train, 1.0, derive_seed(seed, "store", c.client_id)) for c in clients]
    weights = [c.n for c in clients]

    k_table = Table(["k", *METRIC_COLS])
    for k in cfg.kernel.ks:
        kernel = KernelConfig(k, cfg.personalize.sigma)
        accs = []
        for c, store in zip(clients, stores):
            lam, _ = tune_lambda(model, store, kernel, c.val, grid)
            accs.append(evaluate(PersonalizedPredictor(model, store, kernel, lam), c.test))
        k_table.add(k, *_metric_values(metrics(list(zip(weights, accs)))))

    s_table = Table(["sigma", "lambda", *METRIC_COLS])
    for sigma in cfg.kernel.sigmas:
        kernel = KernelConfig(cfg.personalize.k, sigma)
        curves = np.array([lambda_curve(model, store, kernel, c.test, grid) for c, store in zip(clients, stores)])
        for j, lam in enumerate(grid):
            s_table.add(sigma, lam, *_metric_values(metrics(list(zip(weights, curves[:, j])))))
    res = ScenarioResult("kernel_sweep")
    res.tables = {"metrics.csv": k_table, "sigma.csv": s_table, "rounds.csv": rounds_table(logs)}
    return res


def scenario_quality(cfg: ExperimentConfig) -> ScenarioResult:
    """Centrally trained snapshots of varying quality, each used as the representation."""
    seed = cfg.seed
    _, clients = build_scenario_clients(cfg, seed)
    q = cfg.quality
    pooled = Samples.concat([c.train for c in clients])
    checkpoints = sorted(set(q.checkpoints))
    _, snaps = train_central(pooled, fresh_model(cfg, seed), q.epochs, q.lr, q.batch_size, derive_seed(seed, "central"), checkpoints)
    kernel = kernel_config(cfg)
    table = Table(["checkpoint", "global_test_acc", "knn_lambda1_acc", "knn_tuned_acc"])
    for step in checkpoints:
        if step not in snaps:
            continue
        model = snaps[step]
        g, k1, kt = [], [], []
        for c in clients:
            store = build_datastore(model, c.train, 1.0, derive_seed(seed, "store", c.client_id))
            lam, _ = tune_lambda(model, store, kernel, c.val, cfg.personalize.lambda_grid)
            g.append((c.n, accuracy(predict_proba(model, c.test.X), c.test.y)))
            k1.append((c.n, evaluate(PersonalizedPredictor(model, store, kernel, 1.0), c.test)))
            kt.append((c.n, evaluate(PersonalizedPredictor(model, store, kernel, lam), c.test)))
        table.add(step, metrics(g).weighted_avg, metrics(k1).weighted_avg, metrics(kt).weighted_avg)
    res = ScenarioResult("quality_sweep")
    res.tables = {"metrics.csv": table}
    return res


def scenario_hw_split(cfg: ExperimentConfig) -> ScenarioResult:
    """New clients alternate between 'weak' (1/2 - dC) and 'strong' (1/2 + dC) capacity."""
    seed = cfg.seed
    _, clients = build_scenario_clients(cfg, seed)
    old, new = split_old_new(len(clients), cfg.hw_split.train_fraction, seed)
    model, logs = train_global(cfg, [clients[i] for i in old], seed)
    table = Table(["delta_c", "weighted_avg", "weak_avg", "strong_avg"])
    for dc in cfg.hw_split.delta_c:
        everyone, weak, strong = [], [], []
        for pos, i in enumerate(new):
            is_weak = pos % 2 == 0
            cap = 0.5 - dc if is_weak else 0.5 + dc
            if cap < 1e-12:
                cap = 0.0  # no memory at all: falls back to the global model
            e = personalize_client(cfg, model, clients[i], capacity=cap, seed=seed)
            everyone.append((e.n, e.test_acc))
            (weak if is_weak else strong).append((e.n, e.test_acc))
        avg = lambda rows: metrics(rows).weighted_avg if rows else float("nan")
        table.add(dc, avg(everyone), avg(weak), avg(strong))
    res = ScenarioResult("hw_split")
    res.tables = {"metrics.csv": table, "rounds.csv": rounds_table(logs)}
    return res


def scenario_compress(cfg: ExperimentConfig) -> ScenarioResult:
    """Prototype compression of new clients' datastores over (fraction, projection dim)."""
    seed = cfg.seed
    _, clients = build_scenario_clients(cfg, seed)
    old, new = split_old_new(len(clients), cfg.compress.train_fraction, seed)
    model, logs = train_global(cfg, [clients[i] for i in old], seed)
    kernel = kernel_config(cfg)
    table = Table(["fraction", "proj_dim", *METRIC_COLS])
    for frac in cfg.compress.fractions:
        for dim in cfg.compress.proj_dims:
            if dim > model.repr_dim:
                continue
            rows = []
            for i in new:
                c = clients[i]
                store = build_datastore(model, c.train, 1.0, derive_seed(seed, "store", c.client_id))
                n_proto = max(1, math.ceil(frac * len(store) - 1e-9))
                protos = compress(store, n_proto, dim, derive_seed(seed, "compress", c.client_id))
                lam, _ = tune_lambda(model, protos, kernel, c.val, cfg.personalize.lambda_grid)
                rows.append((c.n, evaluate(PersonalizedPredictor(model, protos, kernel, lam), c.test)))
            table.add(frac, dim, *_metric_values(metrics(rows)))
    res = ScenarioResult("compress_sweep")
    res.tables = {"metrics.csv": table, "rounds.csv": rounds_table(logs)}
    return res


def scenario_drift(cfg: ExperimentConfig) -> ScenarioResult:
    """Accuracy timeline under a label-distribution shift at t0 for each datastore policy.

    Row t = 0 .. t0-1: pre-shift batch t is added, then clients are scored
    on D_m. Row t0: the shift happens, nothing new has arrived yet, scoring
    switches to D'_m. Rows t0+1 .. T: post-shift batch t-t0-1 is added,
    then scored on D'_m.
    """
    seed = cfg.seed
    dc = cfg.drift
    d = cfg.data
    pool = build_pool(cfg, seed)
    data_seed = derive_seed(seed, "partition")
    scen = make_drift_scenario(
        pool,
        d.num_clients,
        d.alpha,
        dc.t0,
        dc.T,
        data_seed,
        shift_seed=dc.shift_seed,
        train_fraction=dc.train_fraction,
    )
    empty = Samples.empty(pool.feature_dim)
    fed_clients = [ClientDataset(c.client_id, c.initial, empty, c.test_before) for c in scen.clients]
    model, logs = train_global(cfg, fed_clients, seed)
    kernel = kernel_config(cfg)

    n_before = [len(c.initial) + sum(len(b) for b in c.pre_batches) + len(c.test_before) for c in scen.clients]
    n_after = [sum(len(b) for b in c.post_batches) + len(c.test_after) for c in scen.clients]
    # the global model's output on each test split never changes, cache it
    cache = {}
    for c in scen.clients:
        for tag, test in (("before", c.test_before), ("after", c.test_after)):
            logits_probs = predict_proba(model, test.X)
            cache[(c.client_id, tag)] = logits_probs

    table = Table(["t", "policy", "distribution", "weighted_avg", "unweighted_avg", "datastore_size"])
    for policy in dc.policies:
        stores = [build_datastore(model, c.initial, 1.0, 0, policy=policy) for c in scen.clients]
        for t in range(dc.T + 1):
            after = t >= dc.t0
            for m, c in enumerate(scen.clients):
                batch = None
                if t < dc.t0:
                    batch = c.pre_batches[t]
                elif t > dc.t0:
                    batch = c.post_batches[t - dc.t0 - 1]
                if batch is not None:
                    stores[m] = update_with_samples(stores[m], model, batch)
            rows = []
            for m, c in enumerate(scen.clients):
                test = c.test_after if after else c.test_before
                glob = cache[(c.client_id, "after" if after else "before")]
                _, knn = component_posteriors(model, stores[m], kernel, test.X)
                probs = glob if knn is None else interpolate(knn, glob, dc.lam)
                rows.append(((n_after if after else n_before)[m], accuracy(probs, test.y)))
            rep = metrics(rows)
            size = float(np.mean([len(s) for s in stores]))
            table.add(t, policy, "after" if after else "before", rep.weighted_avg, rep.unweighted_avg, size)
    res = ScenarioResult("drift")
    res.tables = {"timeline.csv": table, "rounds.csv": rounds_table(logs)}
    res.notes["drift_eval"] = DRIFT_EVAL_NOTE
    res.notes["drift_lambda"] = repr(dc.lam)
    res.notes["drift_swapped_clients"] = str(sum(c.swapped for c in scen.clients))
    return res


SCENARIO_RUNNERS = {
    "compare": scenario_compare,
    "unseen": scenario_unseen,
    "capacity_sweep": scenario_capacity,
    "kernel_sweep": scenario_kernel,
    "quality_sweep": scenario_quality,
    "hw_split": scenario_hw_split,
    "drift": scenario_drift,
    "compress_sweep": scenario_compress,
}


def run_scenario(cfg: ExperimentConfig) -> ScenarioResult:
    return SCENARIO_RUNNERS[cfg.scenario](cfg)


# -- output ----------------------------------------------------------------


def write_manifest(path: Path, cfg: ExperimentConfig, status: str, files: Sequence[str], notes: dict, error: str | None = None) -> None:
    lines = [
        f"fedmem_version = {__version__}",
        f"scenario = {cfg.scenario}",
        f"status = {status}",
        f"seed = {cfg.seed}",
        f"files = {', '.join(files)}",
    ]
    if error:
        lines.append(f"error = {error}")
    lines += [f"note.{k} = {v}" for k, v in sorted(notes.items())]
    lines += render_config(cfg)
    path.write_text("\n".join(lines) + "\n")


def write_outputs(result: ScenarioResult, cfg: ExperimentConfig, out_dir: Path) -> list[str]:
    out_dir.mkdir(parents=True, exist_ok=True)
    names = sorted(result.tables)
    for name in names:
        (out_dir / name).write_text(result.tables[name].to_csv())
    write_manifest(out_dir / "manifest.txt", cfg, "ok", names, result.notes)
    return names


def export_scenario(cfg: ExperimentConfig, out_dir: Path) -> list[Path]:
    """Write one binary file per client plus a key=value manifest."""
    out_dir.mkdir(parents=True, exist_ok=True)
    _, clients = build_scenario_clients(cfg, cfg.seed)
    paths = []
    for c in clients:
        p = out_dir / f"client_{c.client_id:04d}.bin"
        write_client_file(p, c, cfg.data.num_classes)
        paths.append(p)
    d = cfg.data
    manifest = [
        f"num_clients = {d.num_clients}",
        f"partitioner = {d.partitioner}",
        f"alpha = {d.alpha!r}",
        f"beta = {d.beta!r}",
        f"seed = {cfg.seed}",
        f"pool_seed = {derive_seed(cfg.seed, 'pool')}",
        f"partition_seed = {derive_seed(cfg.seed, 'partition')}",
        f"split_seed = {derive_seed(cfg.seed, 'split')}",
        f"split_ratios = {', '.join(repr(r) for r in d.split)}",
        f"feature_dim = {d.feature_dim}",
        f"num_classes = {d.num_classes}",
        "client_file_layout = FMCL u32 version, u32 client_id, u32 n_train, u32 n_val, u32 n_test, "
        "u32 feature_dim, u32 num_classes, rows of (u32 label, f32 x feature_dim); little-endian",
    ]
    (out_dir / "manifest.txt").write_text("\n".join(manifest) + "\n")
    return paths
