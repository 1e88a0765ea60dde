"""Experiment configuration: JSON schema, validation, RunSpec assembly.

A config is a single JSON document (schema documented in the README).
Validation happens before any work starts and reports the offending field
path; cross-field rules (accountant premise, tau > rounds, schedule
disjointness, trust consistency) are enforced here too.
"""
from __future__ import annotations

import json
from dataclasses import dataclass

from .control import ControlSettings, CostModel, ObjectiveWeights
from .data import generate_synthetic, partition_csv
from .engine import PROTOCOLS, RunSpec, TrainingSchedule, build_schedule
from .errors import ConfigInvalid, TierflError
from .losses import KINDS, LossSpec
from .privacy import DPConfig, default_alphas
from .topology import TierTopology, build_topology, trust_from_layer_ratios

_DEFAULTS = {
    "seed": 0,
    "protocol": "m2fdp",
    "workers": 1,
    "init_scale": 0.0,
    "gamma": None,
    "beta": None,
    "participation": None,
    "control": None,
    "cost": {},
}


@dataclass(frozen=True)
class ExperimentConfig:
    """Validated configuration plus the raw document it came from."""

    raw: dict
    seed: int
    protocol: str
    topology: TierTopology
    dp: DPConfig | None
    noise_enabled: bool
    loss: LossSpec
    schedule: TrainingSchedule
    cost_model: CostModel
    control: ControlSettings | None
    participation: dict | None
    workers: int
    init_scale: float
    gamma: float | None
    beta: float | None

    def build_dataset(self):
        spec = self.raw["dataset"]
        if spec["kind"] == "synthetic":
            return generate_synthetic(
                num_devices=self.topology.num_devices,
                samples_per_device=spec["samples_per_device"],
                feature_dim=spec["feature_dim"],
                num_classes=spec.get("num_classes", 2),
                heterogeneity=spec.get("heterogeneity", 0.5),
                seed=self.seed)
        return partition_csv(spec["path"], self.topology.num_devices,
                             strategy=spec.get("strategy", "iid"))

    def to_runspec(self) -> RunSpec:
        return RunSpec(
            topology=self.topology, dataset=self.build_dataset(), loss=self.loss,
            schedule=self.schedule, dp=self.dp, protocol=self.protocol,
            noise_enabled=self.noise_enabled, seed=self.seed, gamma=self.gamma,
            beta=self.beta, init_scale=self.init_scale, cost_model=self.cost_model,
            control=self.control, participation=self.participation,
            workers=self.workers)


def _need(doc: dict, path: str, kind=None):
    cur = doc
    for part in path.split("."):
        if not isinstance(cur, dict) or part not in cur:
            raise ConfigInvalid(path, "missing required field")
        cur = cur[part]
    if kind is not None and not isinstance(cur, kind):
        raise ConfigInvalid(path, f"expected {kind}, got {type(cur).__name__}")
    return cur


def _parse_trust(doc_topology: dict, layers) -> dict:
    trust = doc_topology.get("trust")
    ratios = doc_topology.get("secure_ratios")
    cloud_secure = bool(doc_topology.get("cloud_secure", False))
    if trust is not None:
        parsed = {}
        for key, label in trust.items():
            try:
                layer, node = (int(x) for x in key.split(":"))
            except ValueError:
                raise ConfigInvalid(f"topology.trust.{key}",
                                    "keys look like 'layer:node'") from None
            parsed[(layer, node)] = label
        return parsed, cloud_secure
    if ratios is not None:
        try:
            return (trust_from_layer_ratios(layers, ratios, cloud_secure),
                    cloud_secure)
        except TierflError as exc:
            raise ConfigInvalid("topology.secure_ratios", str(exc)) from None
    if len(layers) == 1:
        return {}, cloud_secure
    raise ConfigInvalid("topology", "provide either trust or secure_ratios")


def validate_config(doc: dict) -> ExperimentConfig:
    """Validate a raw config document; raises ConfigInvalid on any problem."""
    merged = dict(_DEFAULTS)
    merged.update(doc)

    protocol = merged["protocol"]
    if protocol not in PROTOCOLS:
        raise ConfigInvalid("protocol", f"one of {PROTOCOLS} expected")

    layers = _need(merged, "topology.layers", list)
    trust, cloud_secure = _parse_trust(merged["topology"], layers)
    try:
        topology = build_topology(layers, trust, cloud_secure=cloud_secure)
    except TierflError as exc:
        raise ConfigInvalid("topology", str(exc)) from None

    dataset_kind = _need(merged, "dataset.kind", str)
    if dataset_kind == "synthetic":
        _need(merged, "dataset.samples_per_device", int)
        _need(merged, "dataset.feature_dim", int)
    elif dataset_kind == "csv":
        _need(merged, "dataset.path", str)
    else:
        raise ConfigInvalid("dataset.kind", "synthetic or csv expected")

    loss_doc = _need(merged, "loss", dict)
    kind = loss_doc.get("kind", "logistic")
    if kind not in KINDS:
        raise ConfigInvalid("loss.kind", f"one of {KINDS} expected")
    try:
        loss = LossSpec(kind=kind, l2=float(loss_doc.get("l2", 0.0)),
                        clip_norm=float(loss_doc.get("clip_norm", 10.0)))
    except TierflError as exc:
        raise ConfigInvalid("loss", str(exc)) from None

    sched_doc = _need(merged, "schedule", dict)
    rounds = _need(merged, "schedule.rounds", int)
    local_steps = _need(merged, "schedule.local_steps")
    periods = {int(l): int(p) for l, p in sched_doc.get("agg_periods", {}).items()}
    explicit = sched_doc.get("agg_sets")
    if explicit is not None:
        explicit = {int(l): ks for l, ks in explicit.items()}
    try:
        schedule = build_schedule(rounds, local_steps, local_agg_periods=periods,
                                  explicit_sets=explicit)
    except TierflError as exc:
        raise ConfigInvalid("schedule", str(exc)) from None
    for layer in schedule.agg_sets:
        if not 1 <= layer <= topology.num_layers - 1:
            raise ConfigInvalid("schedule.agg_periods",
                                f"layer {layer} outside [1, {topology.num_layers - 1}]")

    dp = None
    noise_enabled = False
    dp_doc = merged.get("dp")
    if dp_doc is not None:
        noise_enabled = bool(dp_doc.get("enabled", True))
        for field in ("epsilon", "delta", "sample_rate"):
            _need(merged, f"dp.{field}")
        alphas = dp_doc.get("alphas")
        if alphas is None:
            alphas = default_alphas(topology)
        elif len(alphas) != topology.num_layers:
            raise ConfigInvalid("dp.alphas",
                                f"need one value per layer 1..{topology.num_layers}")
        try:
            dp = DPConfig(epsilon=float(dp_doc["epsilon"]),
                          delta=float(dp_doc["delta"]),
                          sample_rate=float(dp_doc["sample_rate"]),
                          rounds=rounds, alphas=tuple(float(a) for a in alphas),
                          premise_c1=float(dp_doc.get("c1", 1.0)))
        except TierflError as exc:
            raise ConfigInvalid("dp", str(exc)) from None
    elif protocol != "hfl_no_dp":
        raise ConfigInvalid("dp", f"protocol {protocol} needs a dp section")

    cost_model = CostModel(**merged.get("cost", {}))

    control = None
    ctl_doc = merged.get("control")
    if ctl_doc and ctl_doc.get("enabled", True):
        weights = ctl_doc.get("weights", [1.0, 1.0, 1.0])
        if len(weights) != 3:
            raise ConfigInvalid("control.weights", "need [energy, delay, gap]")
        try:
            control = ControlSettings(
                weights=ObjectiveWeights(*[float(w) for w in weights]),
                k_max=int(ctl_doc.get("k_max", schedule.K_max)),
                tau=int(_need(merged, "control.tau", int)))
        except TierflError as exc:
            raise ConfigInvalid("control", str(exc)) from None
        if control.tau <= rounds:
            raise ConfigInvalid("control.tau",
                                f"tau must exceed the round count {rounds}")

    participation = merged.get("participation")
    if participation is not None:
        for key in participation:
            if key not in ("secure", "insecure"):
                raise ConfigInvalid(f"participation.{key}",
                                    "keys are 'secure' and 'insecure'")

    return ExperimentConfig(
        raw=merged, seed=int(merged["seed"]), protocol=protocol,
        topology=topology, dp=dp, noise_enabled=noise_enabled, loss=loss,
        schedule=schedule, cost_model=cost_model, control=control,
        participation=participation, workers=int(merged["workers"]),
        init_scale=float(merged["init_scale"]),
        gamma=merged["gamma"], beta=merged["beta"])


def load_config(path) -> ExperimentConfig:
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except OSError as exc:
        raise ConfigInvalid("config", f"unreadable: {exc}") from None
    except json.JSONDecodeError as exc:
        raise ConfigInvalid("config", f"invalid JSON: {exc}") from None
    return validate_config(doc)


def override(doc: dict, path: str, value) -> dict:
    """Pure override of a dotted path (list indices allowed) in a document."""
    out = json.loads(json.dumps(doc))
    parts = path.split(".")
    cur = out
    for part in parts[:-1]:
        cur = cur[int(part)] if isinstance(cur, list) else cur.setdefault(part, {})
    last = parts[-1]
    if isinstance(cur, list):
        cur[int(last)] = value
    else:
        cur[last] = value
    return out
