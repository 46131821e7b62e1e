"""Round orchestration: broadcast, parallel local rounds, trusted
aggregation, FedAvg update, metrics, and the experiment runner.

The server only ever sees the aggregate: client payloads go into a
TrustedAggregator and the model update is computed from its single total,
which is also the property the accounting relies on.
"""

from __future__ import annotations

import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .accounting import MechanismSpec, NoiseFamily, PrivacyBudget, SubsamplingSpec
from .data_models import Dataset, LogisticModel, Schema, load_csv, make_synthetic, split_iid, train_test_split
from .dpsgd import LocalConfig, PseudoGradient, local_round
from .joint import (
    AccountingPlan,
    HeterogeneityDescriptor,
    account_joint,
    calibrate_joint_noise,
    joint_report,
    steps_for_epochs,
)
from .mechanisms import AggregationError, RingElementVector, aggregate_ring, decode_fixed

try:
    import tomllib
except ImportError:  # Python 3.10
    import tomli as tomllib

__all__ = [
    "ConfigError",
    "ProvenanceError",
    "GlobalModel",
    "ClientState",
    "RoundMetrics",
    "TrustedAggregator",
    "ExperimentConfig",
    "load_config",
    "build_clients",
    "run_round",
    "run_experiment",
    "write_metrics_csv",
    "ModelProvenance",
    "average_pretrained_models",
]

METRICS_COLUMNS = ("round", "loss", "accuracy", "eps_spent")


class ConfigError(ValueError):
    """Invalid experiment configuration; message lists offending paths."""


class ProvenanceError(ValueError):
    """Pre-trained models whose training configs cannot be averaged."""


@dataclass
class GlobalModel:
    params: np.ndarray
    round_index: int = 0

    def __post_init__(self):
        self.params = np.asarray(self.params, dtype=float)
        if not np.isfinite(self.params).all():
            raise ValueError("model parameters must be finite")


@dataclass
class ClientState:
    client_id: int
    train: Dataset
    index_range: tuple[int, int] | None = None
    lr_divisor: float = 1.0
    clip_norm: float | None = None
    sigma: float | None = None


@dataclass
class RoundMetrics:
    round_index: int
    loss: float
    accuracy: float
    wall_time: float
    eps_spent: float


class TrustedAggregator:
    """Idealized secure aggregation: accepts payloads, reveals only the sum."""

    def __init__(self):
        self._items = []

    def submit(self, payload) -> None:
        self._items.append(payload)

    @property
    def n_submissions(self) -> int:
        return len(self._items)

    def total(self):
        if not self._items:
            raise AggregationError("no submissions to aggregate")
        if isinstance(self._items[0], RingElementVector):
            return aggregate_ring(self._items)
        return np.sum(np.stack([np.asarray(p, dtype=float) for p in self._items]),
                      axis=0)


@dataclass
class ExperimentConfig:
    """Fully resolved experiment description (see load_config for the TOML)."""

    seed: int = 0
    rounds: int = 1
    n_clients: int = 1
    local_steps: int = 1
    sampling_rate: float = 0.1
    clip_norm: float = 1.0
    learning_rate: float = 0.1
    mechanism_family: NoiseFamily = NoiseFamily.SKELLAM
    sigma: float | None = None
    target_epsilon: float | None = None
    delta: float = 1e-5
    fixedpoint_scale: int = 2**16
    ring_width: int = 64
    l2_reg: float = 0.0
    data_source: str = "synthetic"
    samples_per_client: int = 500
    features: int = 8
    classes: int = 2
    separation: float = 3.0
    csv_path: str | None = None
    csv_schema: Schema | None = None
    csv_normalization: str = "none"
    test_fraction: float = 0.2
    max_workers: int = 1

    def validate(self) -> None:
        errors = []
        if self.rounds < 0:
            errors.append("experiment.rounds: must be >= 0")
        if self.n_clients < 1:
            errors.append("experiment.clients: must be >= 1")
        if self.local_steps < 1:
            errors.append("local.steps: must be >= 1")
        if not 0.0 <= self.sampling_rate <= 1.0:
            errors.append("local.sampling_rate: must be in [0, 1]")
        if self.clip_norm <= 0:
            errors.append("local.clip_norm: must be positive")
        if self.learning_rate <= 0:
            errors.append("local.learning_rate: must be positive")
        if self.sigma is None and self.target_epsilon is None:
            errors.append("privacy: set either sigma or target_epsilon")
        if self.sigma is not None and self.sigma <= 0:
            errors.append("privacy.sigma: must be positive")
        if not 0.0 < self.delta < 1.0:
            errors.append("privacy.delta: must be in (0, 1)")
        if self.data_source not in ("synthetic", "csv"):
            errors.append("data.source: must be 'synthetic' or 'csv'")
        if self.data_source == "csv" and not self.csv_path:
            errors.append("data.path: required for csv source")
        if not 0.0 <= self.test_fraction < 1.0:
            errors.append("data.test_fraction: must be in [0, 1)")
        if errors:
            raise ConfigError("; ".join(errors))

    def mechanism(self, dimension: int) -> MechanismSpec:
        return MechanismSpec(family=self.mechanism_family,
                             noise_multiplier=self.sigma, clip_norm=self.clip_norm,
                             fixedpoint_scale=self.fixedpoint_scale,
                             dimension=dimension)

    def plan(self, dimension: int, rounds: int | None = None) -> AccountingPlan:
        return AccountingPlan(
            n_clients=self.n_clients, local_steps=self.local_steps,
            rounds=self.rounds if rounds is None else rounds,
            subsampling=SubsamplingSpec(self.sampling_rate),
            mechanism=self.mechanism(dimension))


def load_config(path, overrides: dict | None = None) -> ExperimentConfig:
    """Parse a TOML experiment file; `overrides` take precedence over keys."""
    with open(path, "rb") as fh:
        raw = tomllib.load(fh)
    overrides = overrides or {}

    def section(name):
        return raw.get(name, {})

    exp, data, local, model, priv = (section(s) for s in
                                     ("experiment", "data", "local", "model", "privacy"))
    rate = float(local.get("sampling_rate", 0.1))
    if "steps" in local and "epochs" in local:
        raise ConfigError("local: set steps or epochs, not both")
    if "epochs" in local:
        steps = steps_for_epochs(int(local["epochs"]), rate)
    else:
        steps = int(local.get("steps", 1))

    family = str(priv.get("mechanism", "skellam")).lower()
    if family not in ("skellam", "gaussian"):
        raise ConfigError(f"privacy.mechanism: unknown family {family!r}")

    schema = None
    if "schema" in data:
        s = data["schema"]
        schema = Schema(label=s["label"], numeric=tuple(s.get("numeric", ())),
                        categorical=tuple(s.get("categorical", ())),
                        group=s.get("group"))

    cfg = ExperimentConfig(
        seed=int(exp.get("seed", 0)),
        rounds=int(exp.get("rounds", 1)),
        n_clients=int(exp.get("clients", 1)),
        local_steps=steps,
        sampling_rate=rate,
        clip_norm=float(local.get("clip_norm", 1.0)),
        learning_rate=float(local.get("learning_rate", 0.1)),
        mechanism_family=NoiseFamily(family),
        sigma=float(priv["sigma"]) if "sigma" in priv else None,
        target_epsilon=float(priv["target_epsilon"]) if "target_epsilon" in priv else None,
        delta=float(priv.get("delta", 1e-5)),
        fixedpoint_scale=int(priv.get("fixedpoint_scale", 2**16)),
        ring_width=int(priv.get("ring_width", 64)),
        l2_reg=float(model.get("l2_reg", 0.0)),
        data_source=str(data.get("source", "synthetic")),
        samples_per_client=int(data.get("samples_per_client", 500)),
        features=int(data.get("features", 8)),
        classes=int(data.get("classes", 2)),
        separation=float(data.get("separation", 3.0)),
        csv_path=data.get("path"),
        csv_schema=schema,
        csv_normalization=str(data.get("normalization", "none")),
        test_fraction=float(data.get("test_fraction", 0.2)),
        max_workers=int(exp.get("max_workers", 1)),
    )
    for key, val in overrides.items():
        if val is not None:
            cfg = replace(cfg, **{key: val})
    cfg.validate()
    return cfg


def build_clients(cfg: ExperimentConfig) -> tuple[list[ClientState], Dataset, LogisticModel]:
    """Materialize per-client training data, the pooled test set, and the model.

    Client datasets are pairwise disjoint (asserted); each client's data is
    split 80/20 internally and the held-out parts are pooled for evaluation.
    """
    if cfg.data_source == "synthetic":
        total = cfg.n_clients * cfg.samples_per_client
        pool = make_synthetic(total, cfg.features, cfg.classes, cfg.separation,
                              seed=cfg.seed)
        shards = split_iid(pool, cfg.n_clients, seed=cfg.seed + 1)
        clients, test_parts = [], []
        offset = 0
        for i, shard in enumerate(shards):
            train, test = train_test_split(shard, cfg.test_fraction,
                                           seed=cfg.seed + 2 + i)
            clients.append(ClientState(client_id=i, train=train,
                                       index_range=(offset, offset + shard.n)))
            offset += shard.n
            if test.n:
                test_parts.append(test)
        ranges = [c.index_range for c in clients]
        assert all(a[1] <= b[0] for a, b in zip(ranges, ranges[1:])), \
            "client shards must be disjoint"
        test = Dataset(features=np.concatenate([t.features for t in test_parts]),
                       labels=np.concatenate([t.labels for t in test_parts])) \
            if test_parts else Dataset(np.zeros((0, cfg.features)), np.zeros(0, dtype=int))
        num_classes = cfg.classes
    else:
        split = load_csv(cfg.csv_path, cfg.csv_schema,
                         normalization=cfg.csv_normalization,
                         test_fraction=cfg.test_fraction, seed=cfg.seed)
        clients = [ClientState(client_id=i, train=ds)
                   for i, ds in enumerate(split.clients)]
        test = split.test
        num_classes = int(max(max((c.train.labels.max(initial=0) for c in clients)),
                              test.labels.max(initial=0))) + 1
        if len(clients) != cfg.n_clients:
            raise ConfigError(
                f"data.path: group column yields {len(clients)} clients but "
                f"experiment.clients = {cfg.n_clients}")
    model = LogisticModel(num_classes=max(num_classes, 2),
                          num_features=clients[0].train.dim, l2_reg=cfg.l2_reg)
    return clients, test, model


def _client_config(cfg: ExperimentConfig, client: ClientState,
                   dimension: int) -> LocalConfig:
    mech = MechanismSpec(
        family=cfg.mechanism_family,
        noise_multiplier=client.sigma if client.sigma is not None else cfg.sigma,
        clip_norm=client.clip_norm if client.clip_norm is not None else cfg.clip_norm,
        fixedpoint_scale=cfg.fixedpoint_scale, dimension=dimension)
    lr = cfg.learning_rate / client.lr_divisor
    if mech.family == NoiseFamily.SKELLAM and client.lr_divisor != 1.0:
        raise ConfigError(
            "discrete mode cannot apply per-client learning rates at the "
            "aggregator; use the real-valued Gaussian mode for that study")
    return LocalConfig(steps=cfg.local_steps, sampling_rate=cfg.sampling_rate,
                       clip_norm=mech.clip_norm, learning_rate=lr, mechanism=mech,
                       ring_width=cfg.ring_width, max_clients=cfg.n_clients)


def run_round(model: GlobalModel, clients: list[ClientState],
              cfg: ExperimentConfig, net: LogisticModel, test: Dataset,
              aggregator: TrustedAggregator | None = None) -> tuple[GlobalModel, RoundMetrics]:
    """One federated round: fan out local rounds, aggregate, apply FedAvg.

    theta_t = theta_{t-1} + (1/N) * sum_i Delta_i, with the sum produced by
    the trusted aggregator (ring-exact in discrete mode).
    """
    start = time.perf_counter()
    t = model.round_index + 1
    n = len(clients)
    aggregator = aggregator if aggregator is not None else TrustedAggregator()
    discrete = cfg.mechanism_family == NoiseFamily.SKELLAM

    def work(client: ClientState) -> PseudoGradient:
        local_cfg = _client_config(cfg, client, net.dim)
        return local_round(model.params, client.train.features, client.train.labels,
                           net, local_cfg, cfg.seed, t, client.client_id)

    if cfg.max_workers > 1:
        with ThreadPoolExecutor(max_workers=cfg.max_workers) as pool:
            results = list(pool.map(work, clients))
    else:
        results = [work(c) for c in clients]

    # clients hand the aggregator their payloads in a fixed order; the
    # server-side update below touches only the single aggregate
    for pg in results:
        aggregator.submit(pg.ring if discrete else pg.delta)
    total = aggregator.total()
    if discrete:
        gamma = results[0].gamma
        params = model.params - (gamma / n) * decode_fixed(total)
    else:
        params = model.params + total / n
    new_model = GlobalModel(params=params, round_index=t)

    if test.n:
        loss = net.loss(params, test.features, test.labels)
        acc = net.accuracy(params, test.features, test.labels)
    else:
        loss, acc = math.nan, math.nan
    eps = account_joint(cfg.plan(net.dim, rounds=t), cfg.delta).epsilon
    metrics = RoundMetrics(round_index=t, loss=loss, accuracy=acc,
                           wall_time=time.perf_counter() - start, eps_spent=eps)
    return new_model, metrics


def run_experiment(cfg: ExperimentConfig,
                   output_dir=None) -> tuple[list[RoundMetrics], dict, GlobalModel]:
    """Run T rounds; emit per-round metrics and the final accounting report.

    With a fixed seed the metrics table is bit-identical across runs in
    discrete mode. Returns (metrics, report, final model) and, when
    output_dir is given, writes metrics.csv and report.json there.
    """
    cfg.validate()
    clients, test, net = build_clients(cfg)
    if cfg.sigma is None and cfg.rounds > 0:
        target = PrivacyBudget(epsilon=cfg.target_epsilon, delta=cfg.delta)
        calibration_plan = replace(cfg, sigma=1.0).plan(net.dim)
        cfg = replace(cfg, sigma=calibrate_joint_noise(calibration_plan, target))

    model = GlobalModel(params=net.init_params(), round_index=0)
    metrics: list[RoundMetrics] = []
    for _ in range(cfg.rounds):
        model, round_metrics = run_round(model, clients, cfg, net, test)
        metrics.append(round_metrics)

    if cfg.rounds > 0:
        report = joint_report(cfg.plan(net.dim), cfg.delta)
    else:
        report = {"inputs": {"rounds": 0}, "epsilon": 0.0, "delta": cfg.delta}
    report["config"] = {
        "seed": cfg.seed, "rounds": cfg.rounds, "clients": cfg.n_clients,
        "local_steps": cfg.local_steps, "sampling_rate": cfg.sampling_rate,
        "mechanism": cfg.mechanism_family.value, "sigma_per_client": cfg.sigma,
        "sigma_total": cfg.sigma * math.sqrt(cfg.n_clients) if cfg.sigma else None,
        "delta": cfg.delta, "learning_rate": cfg.learning_rate,
        "clip_norm": cfg.clip_norm, "fixedpoint_scale": cfg.fixedpoint_scale,
        "ring_width": cfg.ring_width,
    }
    if metrics:
        report["final_accuracy"] = metrics[-1].accuracy
        report["final_loss"] = metrics[-1].loss
        report["best_accuracy"] = max(m.accuracy for m in metrics)
        report["best_loss"] = min(m.loss for m in metrics)

    if output_dir is not None:
        out = Path(output_dir)
        out.mkdir(parents=True, exist_ok=True)
        write_metrics_csv(metrics, out / "metrics.csv")
        from .accounting import write_report
        write_report(report, out / "report.json")
    return metrics, report, model


def write_metrics_csv(metrics: list[RoundMetrics], path) -> None:
    lines = [",".join(METRICS_COLUMNS)]
    for m in metrics:
        lines.append(f"{m.round_index},{m.loss!r},{m.accuracy!r},{m.eps_spent!r}")
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write("\n".join(lines) + "\n")


@dataclass(frozen=True)
class ModelProvenance:
    """How one pre-trained model was produced, for post-hoc averaging."""

    mechanism: MechanismSpec
    steps: int
    sampling_rate: float
    rounds: int = 1
    fusion_factor: int = 1

    def __post_init__(self):
        if self.steps < 1 or self.rounds < 1 or self.fusion_factor < 1:
            raise ValueError("steps, rounds, and fusion_factor must be >= 1")


def average_pretrained_models(params_list: list[np.ndarray],
                              provenances: list[ModelProvenance],
                              delta: float = 1e-5) -> tuple[np.ndarray, PrivacyBudget]:
    """Uniform average of independently trained models and its joint budget.

    All models must reduce (after fusing local steps) to the same per-step
    structure: equal effective step counts, effective clipping norms,
    sampling rates, rounds, and noise family. The joint budget then comes
    from the sum-dominating accounting over the union of the training runs.
    """
    if len(params_list) != len(provenances) or not params_list:
        raise ProvenanceError("need one provenance per model and at least one model")
    base = provenances[0]
    eff_steps, eff_clips = [], []
    for i, p in enumerate(provenances):
        if p.steps % p.fusion_factor != 0:
            raise ProvenanceError(
                f"model {i}: {p.steps} steps are not divisible by fusion factor "
                f"{p.fusion_factor}")
        eff_steps.append(p.steps // p.fusion_factor)
        eff_clips.append(p.mechanism.clip_norm * p.fusion_factor)
        if p.mechanism.family != base.mechanism.family:
            raise ProvenanceError(f"model {i}: mechanism family differs")
        if p.mechanism.fixedpoint_scale != base.mechanism.fixedpoint_scale:
            raise ProvenanceError(f"model {i}: fixed-point scale differs")
        if p.sampling_rate != base.sampling_rate or p.rounds != base.rounds:
            raise ProvenanceError(f"model {i}: sampling rate or round count differs")
    if len(set(eff_steps)) != 1:
        raise ProvenanceError(
            f"effective step counts differ after fusion: {sorted(set(eff_steps))}")
    if max(eff_clips) - min(eff_clips) > 1e-9 * max(eff_clips):
        raise ProvenanceError(
            f"effective clipping norms differ after fusion: {eff_clips}")

    shapes = {np.asarray(p).shape for p in params_list}
    if len(shapes) != 1:
        raise ProvenanceError(f"parameter shapes differ: {shapes}")
    averaged = np.mean(np.stack([np.asarray(p, dtype=float) for p in params_list]),
                       axis=0)

    het = None
    sigmas = [p.mechanism.noise_multiplier for p in provenances]
    clips = [p.mechanism.clip_norm for p in provenances]
    factors = [p.fusion_factor for p in provenances]
    if (len(set(sigmas)) > 1 or len(set(clips)) > 1 or len(set(factors)) > 1):
        het = HeterogeneityDescriptor(
            per_client_clip=tuple(clips), per_client_sigma=tuple(sigmas),
            fusion=tuple((p.steps, p.fusion_factor) for p in provenances))
    template = replace(base.mechanism, clip_norm=eff_clips[0],
                       dimension=max(p.mechanism.dimension for p in provenances))
    plan = AccountingPlan(
        n_clients=len(params_list), local_steps=eff_steps[0], rounds=base.rounds,
        subsampling=SubsamplingSpec(base.sampling_rate), mechanism=template,
        heterogeneity=het)
    return averaged, account_joint(plan, delta)
