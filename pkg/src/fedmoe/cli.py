"""Experiment runner: partition, fedavg, personalize, report, selftest.

Artifacts live under the configured output directory:
  partition.json / partition_histogram.csv   (partition)
  checkpoint.ckpt / rounds.csv / metrics_fedavg.csv / manifest_fedavg.json
  metrics_<algorithm>.csv / clients/<algorithm>/client_<id>.ckpt
  report.csv / deltas.csv                    (report)
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__, checkpoint, data, evaluation, federation, models, personalization
from .config import ExperimentConfig, load_config
from .errors import ConfigError, FedmoeError
from .federation import derive_seed
from .numerics.tensor import Tensor

log = logging.getLogger("fedmoe")

# Spawn-key namespaces for deriving per-purpose seeds from the global seed.
_SEED_DATA = 10
_SEED_LOCAL = 3
_SEED_SPLIT = 4
_SEED_PERSONALIZE = 5


def build_datasets(cfg: ExperimentConfig) -> tuple[data.LabeledDataset, data.LabeledDataset]:
    """Materialize (train, test) from the configured source."""
    if cfg.dataset.source == "synthetic":
        seed = derive_seed(cfg.seed, _SEED_DATA)
        kwargs = dict(
            classes=cfg.dataset.classes,
            channels=cfg.dataset.channels,
            noise=cfg.dataset.noise,
            center_jitter=cfg.dataset.center_jitter,
        )
        train = data.make_synthetic(per_class=cfg.dataset.per_class, seed=seed, **kwargs)
        test = data.synthetic_test_set(seed, per_class=cfg.dataset.test_per_class, **kwargs)
    else:
        paths = cfg.dataset.idx_paths
        train = data.pad_to_32(
            data.load_idx(paths["train_images"], paths["train_labels"], classes=cfg.dataset.classes)
        )
        test = data.pad_to_32(
            data.load_idx(paths["test_images"], paths["test_labels"], classes=cfg.dataset.classes)
        )
    data.require_all_classes(train)
    return train, test


def _partition_path(cfg: ExperimentConfig) -> Path:
    return cfg.out_dir / "partition.json"


def load_partition(cfg: ExperimentConfig) -> data.ClientPartition:
    path = _partition_path(cfg)
    if not path.exists():
        raise ConfigError(
            f"partition file {path} does not exist; run `fedmoe partition --config ...` first"
        )
    blob = json.loads(path.read_text())
    return data.ClientPartition(tuple(tuple(c) for c in blob["clients"]))


def _write_manifest(cfg: ExperimentConfig, name: str, extra: dict) -> None:
    manifest = {
        "version": __version__,
        "seed": cfg.seed,
        "config": cfg.snapshot(),
    }
    manifest.update(extra)
    path = cfg.out_dir / f"manifest_{name}.json"
    path.write_text(json.dumps(manifest, sort_keys=True, indent=2) + "\n")


def cmd_partition(cfg: ExperimentConfig) -> int:
    train, _ = build_datasets(cfg)
    partition = data.dirichlet_partition(train, cfg.partition)
    cfg.out_dir.mkdir(parents=True, exist_ok=True)

    blob = {
        "clients": [list(c) for c in partition.clients],
        "concentration": cfg.partition.concentration,
        "partition_seed": cfg.partition.seed,
        "dataset_size": len(train),
    }
    _partition_path(cfg).write_text(json.dumps(blob, sort_keys=True) + "\n")

    with open(cfg.out_dir / "partition_histogram.csv", "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["client_id"] + [f"class_{c}" for c in range(train.classes)] + ["total"])
        for cid, indices in enumerate(partition.clients):
            counts = np.bincount(train.labels[list(indices)], minlength=train.classes)
            writer.writerow([cid] + counts.tolist() + [int(counts.sum())])
    log.info("partitioned %d examples across %d clients", len(train), len(partition))
    print(f"wrote {_partition_path(cfg)} ({len(partition)} clients)")
    return 0


def cmd_fedavg(cfg: ExperimentConfig) -> int:
    train, test = build_datasets(cfg)
    partition = load_partition(cfg)

    def eval_fn(params: models.ModelParams) -> float:
        return evaluation.global_test(lambda x: models.forward(params, x), test)

    result = federation.train_federated(
        train, partition, cfg.model, cfg.federation, eval_fn, workers=cfg.workers
    )

    with open(cfg.out_dir / "rounds.csv", "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["round", "sampled_clients", "global_acc"])
        for record in result.rounds:
            acc = "" if record.accuracy is None else f"{record.accuracy:.10f}"
            writer.writerow([record.round_index, ";".join(map(str, record.client_ids)), acc])

    ckpt_path = cfg.out_dir / "checkpoint.ckpt"
    digest = checkpoint.save_model(
        ckpt_path,
        result.best.params,
        extra={"round": result.best.round_index, "accuracy": result.best.accuracy, "seed": cfg.seed},
    )

    # Per-client baseline records: the global model under each client's ratios.
    per_class = evaluation.per_class_accuracy(
        lambda x: models.forward(result.best.params, x), test
    )
    global_acc = result.best.accuracy
    records = []
    for cid, indices in enumerate(partition.clients):
        ratios = evaluation.class_ratios(train.labels[list(indices)], train.classes)
        records.append(
            evaluation.MetricsRecord(
                run_id=f"seed{cfg.seed}",
                algorithm="fedavg",
                client_id=cid,
                local_acc=evaluation.local_test_from_per_class(per_class, ratios),
                global_acc=global_acc,
                seed=cfg.seed,
            )
        )
    evaluation.write_metrics_csv(records, cfg.out_dir / "metrics_fedavg.csv")
    _write_manifest(cfg, "fedavg", {"checkpoint_sha256": digest, "best_round": result.best.round_index})
    log.info("best round %d, global accuracy %.4f", result.best.round_index, global_acc)
    print(f"wrote {ckpt_path} (best round {result.best.round_index}, global acc {global_acc:.4f})")
    return 0


def _client_seed(cfg: ExperimentConfig, namespace: int, client_id: int) -> int:
    return derive_seed(cfg.seed, namespace, client_id)


def _personalize_one(
    cfg: ExperimentConfig,
    algorithm: str,
    client_id: int,
    indices,
    train: data.LabeledDataset,
    global_params: models.ModelParams,
    split: models.SplitModel,
):
    """Train one client; returns (predictor pieces, artifact tensors, mean_g)."""
    client_ds = train.subset(list(indices))
    pcfg = cfg.personalization[algorithm]
    seed = _client_seed(cfg, _SEED_PERSONALIZE, client_id)

    if algorithm == "local":
        trained = personalization.train_local_baseline(
            client_ds,
            cfg.model,
            seed=_client_seed(cfg, _SEED_LOCAL, client_id),
            epochs=cfg.local_baseline.epochs,
            sgd=cfg.local_baseline.sgd,
            batch_size=cfg.local_baseline.batch,
        )
        return ("full", trained.tensors), dict(trained.tensors), None

    if algorithm == "pfl_ft":
        client = personalization.pfl_ft(global_params, client_ds, pcfg, seed, client_id)
        return ("full", client.personalized), dict(client.personalized), None

    if algorithm == "pfl_fb":
        client = personalization.pfl_fb(split, client_ds, pcfg, seed, client_id)
        return ("classifier", client.personalized), dict(client.personalized), None

    run = personalization.run_pfl_mf if algorithm == "pfl_mf" else personalization.run_pfl_mfe
    client_split = data.split_per_gate(
        indices, pcfg.split_ratio, _client_seed(cfg, _SEED_SPLIT, client_id)
    )
    per_ds = train.subset(client_split.per_indices)
    gate_ds = train.subset(client_split.gate_indices)
    client = run(client_id, per_ds, gate_ds, split, pcfg, seed)
    mean_g = personalization.mean_gate_weight(client, gate_ds)
    artifact = dict(client.personalized)
    artifact["gate.weight"] = client.gate.weights
    artifact["gate.bias"] = Tensor(np.array([client.gate.bias]))
    return ("moe", client), artifact, mean_g


class _TestSetEvaluator:
    """Shared per-algorithm evaluation state: test-set extractor features are
    computed once and reused by every client that shares the extractor."""

    def __init__(self, cfg: ExperimentConfig, test: data.LabeledDataset, split: models.SplitModel):
        self.cfg = cfg
        self.test = test
        self.split = split
        self._features: Tensor | None = None
        self._raw_flat: np.ndarray | None = None

    @property
    def features(self) -> Tensor:
        if self._features is None:
            chunks = [
                models.extract_features(self.split, Tensor._wrap(self.test.features.data[s : s + 512]))
                for s in range(0, len(self.test), 512)
            ]
            self._features = Tensor._wrap(np.concatenate([c.data for c in chunks]))
        return self._features

    @property
    def raw_flat(self) -> np.ndarray:
        if self._raw_flat is None:
            self._raw_flat = self.test.features.data.reshape(len(self.test), -1)
        return self._raw_flat

    def per_class_accuracy(self, kind: str, payload) -> np.ndarray:
        if kind == "full":
            params = models.ModelParams(self.cfg.model, dict(payload))
            predictor = lambda x: models.forward(params, x)
            return evaluation.per_class_accuracy(predictor, self.test)
        if kind == "classifier":
            logits = models.classify(self.split, self.features, classifier=dict(payload))
            pred = np.argmax(logits.data, axis=1)
        else:
            client = payload
            glob = models.classify(self.split, self.features)
            loc = models.classify(self.split, self.features, classifier=client.personalized)
            v = self.raw_flat if client.gate.input_mode == "raw" else self.features.data
            g = models.gate_forward(client.gate, Tensor._wrap(v))
            pred = np.argmax(models.mix_outputs(g, glob, loc).data, axis=1)
        correct = np.bincount(self.test.labels[pred == self.test.labels], minlength=self.test.classes)
        counts = self.test.class_counts()
        with np.errstate(invalid="ignore"):
            return np.where(counts > 0, correct / np.maximum(counts, 1), np.nan)


def cmd_personalize(cfg: ExperimentConfig, algorithm: str) -> int:
    if algorithm not in personalization.ALGORITHMS:
        raise ConfigError(f"algorithm: expected one of {personalization.ALGORITHMS}, got {algorithm!r}")
    train, test = build_datasets(cfg)
    partition = load_partition(cfg)
    ckpt_path = cfg.out_dir / "checkpoint.ckpt"
    if not ckpt_path.exists():
        raise ConfigError(f"checkpoint {ckpt_path} does not exist; run `fedmoe fedavg --config ...` first")
    global_params, _ = checkpoint.load_model(ckpt_path)
    if global_params.spec != cfg.model:
        raise ConfigError(
            f"checkpoint model spec {global_params.spec} does not match configured {cfg.model}"
        )
    split = models.split_model(global_params)
    evaluator = _TestSetEvaluator(cfg, test, split)
    is_moe = algorithm in personalization.MOE_ALGORITHMS

    def work(cid: int):
        predictor, artifact, mean_g = _personalize_one(
            cfg, algorithm, cid, partition.clients[cid], train, global_params, split
        )
        return cid, predictor, artifact, mean_g

    client_ids = list(range(len(partition)))
    if cfg.workers > 1:
        with ThreadPoolExecutor(max_workers=cfg.workers) as pool:
            results = list(pool.map(work, client_ids))
    else:
        results = [work(cid) for cid in client_ids]

    artifact_dir = cfg.out_dir / "clients" / algorithm
    artifact_dir.mkdir(parents=True, exist_ok=True)
    records = []
    for cid, (kind, payload), artifact, mean_g in results:
        ratios = evaluation.class_ratios(train.labels[list(partition.clients[cid])], train.classes)
        per_class = evaluator.per_class_accuracy(kind, payload)
        local_acc = evaluation.local_test_from_per_class(per_class, ratios)
        counts = evaluator.test.class_counts()
        global_acc = float(np.nansum(per_class * counts) / len(evaluator.test))
        records.append(
            evaluation.MetricsRecord(
                run_id=f"seed{cfg.seed}",
                algorithm=algorithm,
                client_id=cid,
                local_acc=local_acc,
                global_acc=global_acc,
                seed=cfg.seed,
                mean_gate=mean_g,
            )
        )
        extra = {"kind": "client", "algorithm": algorithm, "client_id": cid, "seed": cfg.seed}
        if is_moe:
            extra["gate_input_mode"] = "raw" if algorithm == "pfl_mf" else "feature"
        checkpoint.save_tensors(artifact_dir / f"client_{cid}.ckpt", artifact, extra)

    evaluation.write_metrics_csv(records, cfg.out_dir / f"metrics_{algorithm}.csv", include_mean_gate=is_moe)
    evaluation.write_metrics_jsonl(records, cfg.out_dir / f"metrics_{algorithm}.jsonl")
    _write_manifest(cfg, algorithm, {"clients": len(partition)})
    mean_local = float(np.mean([r.local_acc for r in records]))
    mean_global = float(np.mean([r.global_acc for r in records]))
    log.info("%s: mean local %.4f, mean global %.4f", algorithm, mean_local, mean_global)
    print(f"{algorithm}: mean local acc {mean_local:.4f}, mean global acc {mean_global:.4f}")
    return 0


def cmd_report(metric_paths: list[str], out_dir: Path) -> int:
    records = []
    for path in metric_paths:
        records.extend(evaluation.read_metrics_csv(path))
    if not records:
        raise ConfigError("report: no metrics records found in the given files")
    summary = evaluation.summarize(records)

    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "report.csv", "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["algorithm", "clients", "mean_local_acc", "mean_global_acc"])
        for row in summary.rows:
            writer.writerow([row.algorithm, row.clients, f"{row.mean_local_acc:.10f}", f"{row.mean_global_acc:.10f}"])

    with open(out_dir / "deltas.csv", "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["algorithm", "client_id", "local_acc_delta", "global_acc_delta"])
        for alg in sorted(summary.deltas):
            for cid, dl, dg in summary.deltas[alg]:
                writer.writerow([alg, cid, f"{dl:.10f}", f"{dg:.10f}"])

    width = max(len(r.algorithm) for r in summary.rows)
    print(f"{'algorithm'.ljust(width)}  clients  local%   global%")
    for row in summary.rows:
        print(
            f"{row.algorithm.ljust(width)}  {row.clients:7d}  {100 * row.mean_local_acc:6.2f}   "
            f"{100 * row.mean_global_acc:6.2f}"
        )
    return 0


def cmd_selftest() -> int:
    """Quick built-in property checks; exits nonzero if any fails."""
    import tempfile

    from .numerics import SgdConfig, graph
    from .numerics.optim import OptimizerState, sgd_step

    failures = 0

    def check(name: str, ok: bool):
        nonlocal failures
        print(f"  {'PASS' if ok else 'FAIL'}  {name}")
        failures += 0 if ok else 1

    rng = np.random.default_rng(0)

    # Gradient vs central finite differences on a dense + cross-entropy path.
    x, w, b = rng.normal(size=(3, 4)), rng.normal(size=(4, 3)), rng.normal(size=3)
    labels = [0, 2, 1]
    leaves = [graph.leaf(w), graph.leaf(b)]
    loss = graph.cross_entropy(graph.dense(graph.leaf(x), leaves[0], leaves[1]), labels)
    analytic = graph.gradient(loss, leaves)
    worst = 0.0
    for arr, got in zip((w, b), analytic):
        num = np.zeros_like(arr)
        flat, nflat = arr.reshape(-1), num.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + 1e-5
            up = float(graph.cross_entropy(graph.dense(graph.leaf(x), graph.leaf(w), graph.leaf(b)), labels).data)
            flat[i] = orig - 1e-5
            down = float(graph.cross_entropy(graph.dense(graph.leaf(x), graph.leaf(w), graph.leaf(b)), labels).data)
            flat[i] = orig
            nflat[i] = (up - down) / 2e-5
        worst = max(worst, float(np.max(np.abs(got - num) / np.maximum(1.0, np.abs(num)))))
    check(f"gradient matches finite differences (max rel err {worst:.2e})", worst < 1e-4)

    # Partition properties.
    ds = data.make_synthetic(classes=5, per_class=20, seed=1, side=8)
    part = data.dirichlet_partition(ds, data.PartitionSpec(8, 0.5, seed=2))
    flat = sorted(i for c in part.clients for i in c)
    check("partition is a disjoint cover", flat == list(range(len(ds))))
    totals = sum(np.bincount(ds.labels[list(c)], minlength=5) for c in part.clients)
    check("per-class totals conserved", np.array_equal(totals, ds.class_counts()))
    check("all clients nonempty", min(part.sizes()) >= 1)

    # Mixing boundaries.
    glob, loc = Tensor(rng.normal(size=(10, 4))), Tensor(rng.normal(size=(10, 4)))
    check("mix at g=1 returns the global expert", np.array_equal(models.mix_outputs(1.0, glob, loc).data, glob.data))
    check("mix at g=0 returns the local expert", np.array_equal(models.mix_outputs(0.0, glob, loc).data, loc.data))

    # Plain SGD equality.
    p = {"w": Tensor(rng.normal(size=5))}
    g = rng.normal(size=5)
    stepped = sgd_step(p, {"w": g}, OptimizerState(), SgdConfig(learning_rate=0.1))
    check("sgd without momentum equals param - lr*grad", np.array_equal(stepped["w"].data, p["w"].data - 0.1 * g))

    # Checkpoint round trip.
    spec = models.ModelSpec("mlp", channels=1, classes=3, hidden_sizes=(6,))
    params = models.build_model(spec, seed=3)
    with tempfile.TemporaryDirectory() as tmp:
        path = Path(tmp) / "m.ckpt"
        checkpoint.save_model(path, params, extra={"seed": 3})
        loaded, _ = checkpoint.load_model(path)
        ok = all(np.array_equal(loaded.tensors[k].data, params.tensors[k].data) for k in params.tensors)
    check("checkpoint round trip preserves every bit", ok)

    print("selftest:", "ok" if failures == 0 else f"{failures} failure(s)")
    return 0 if failures == 0 else 1


def _parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fedmoe", description=__doc__)
    parser.add_argument("--version", action="version", version=f"fedmoe {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", required=True, help="experiment INI file")
        p.add_argument("--seed", type=int, default=None, help="override the global seed")
        p.add_argument("--workers", type=int, default=None, help="parallel client workers")
        p.add_argument("--out", default=None, help="override the output directory")

    common(sub.add_parser("partition", help="build and save the client partition"))
    common(sub.add_parser("fedavg", help="run federated training from the saved partition"))
    p = sub.add_parser("personalize", help="run one personalization algorithm for every client")
    common(p)
    p.add_argument("--algorithm", required=True, choices=personalization.ALGORITHMS)
    r = sub.add_parser("report", help="aggregate metrics CSVs into a report")
    r.add_argument("metrics", nargs="+", help="metrics CSV files")
    r.add_argument("--out", default="runs/latest", help="output directory")
    sub.add_parser("selftest", help="run quick built-in property checks")
    return parser


def main(argv=None) -> int:
    level = os.environ.get("FEDMOE_LOG", "error").upper()
    logging.basicConfig(level=getattr(logging, level, logging.ERROR), format="%(name)s %(message)s")
    args = _parser().parse_args(argv)
    try:
        if args.command == "selftest":
            return cmd_selftest()
        if args.command == "report":
            return cmd_report(args.metrics, Path(args.out))
        cfg = load_config(args.config, seed_override=args.seed, workers_override=args.workers,
                          out_override=args.out)
        cfg.out_dir.mkdir(parents=True, exist_ok=True)
        if args.command == "partition":
            return cmd_partition(cfg)
        if args.command == "fedavg":
            return cmd_fedavg(cfg)
        return cmd_personalize(cfg, args.algorithm)
    except FedmoeError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
