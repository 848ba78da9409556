"""Desk-scale experiment recipes and their flat key/value configuration.

Every stage is a plain function of a resolved config dict plus the upstream
networks it needs, so the CLI, the acceptance tests and ad hoc scripts all
run the same code.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from . import nn, stats, train
from .data import Dataset, load_csv, synth_dataset
from .model import QuantizedModel
from .nn import DistillationConfig, Network
from .quantcore import UniformScheme
from .rng import derive

TEACHER_KEY = 0x7EAC
STUDENT_KEY = 0x57D0


class ConfigError(ValueError):
    pass


# name -> (default, allowed values or None)
SCHEMA: dict[str, tuple[object, tuple | None]] = {
    "seed": (0, None),
    # data
    "dataset": ("spirals", ("spirals", "blobs", "csv")),
    "n": (2000, None),
    "classes": (2, None),
    "noise": (0.5, None),
    "test_fraction": (0.25, None),
    "csv_path": ("", None),
    "label_column": ("label", None),
    # architectures
    "teacher_hidden": ("64,64,64", None),
    "student_hidden": ("32", None),
    # full-precision training
    "epochs": (100, None),
    "lr": (0.1, None),
    "batch_size": (32, None),
    "temperature": (5.0, None),
    "soft_weight": (0.5, None),
    "distill": (True, None),
    # uniform quantization
    "bits": (4, None),
    "bucket_size": (256, None),
    "bucketing": (True, None),
    "mode": ("deterministic", ("deterministic", "stochastic")),
    "pm_source": ("plain", ("plain", "distilled", "teacher")),
    "exclude_ends": (False, None),
    # quantized distillation
    "qd_loss": ("distill", ("distill", "normal")),
    "qd_init": ("student", ("student", "scratch")),
    "qd_lr": (0.05, None),
    "qd_epochs": (50, None),
    "qd_schedule": ("halving", train.SCHEDULES),
    # differentiable quantization
    "dq_source": ("distilled", ("plain", "distilled")),
    "dq_loss": ("distill", ("distill", "task")),
    "dq_init": ("quantile", ("quantile", "uniform")),
    "dq_lr": (0.001, None),
    "dq_iterations": (0, None),
    "redistribute": (True, None),
    "redistribute_batches": (10, None),
    # noise study
    "ns_n": ("100,10000", None),
    "ns_s": ("15", None),
    "ns_bucket_size": (256, None),
    "ns_trials": (10000, None),
    "ns_quantize_inputs": (False, None),
    "ns_distribution": ("uniform", ("uniform", "gaussian")),
    "ns_a": (-1.0, None),
    "ns_b": (1.0, None),
    "ns_resample": (False, None),
    # reporting
    "float_bits": (32, None),
}

_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


def _coerce(key: str, raw) -> object:
    default, allowed = SCHEMA[key]
    text = str(raw).strip()
    try:
        if isinstance(default, bool):
            low = text.lower()
            if low not in _TRUE | _FALSE:
                raise ValueError
            value = low in _TRUE
        elif isinstance(default, int):
            value = int(text)
        elif isinstance(default, float):
            value = float(text)
        else:
            value = text
    except ValueError:
        raise ConfigError(f"{key}: cannot read {text!r} as {type(default).__name__}") from None
    if allowed is not None and value not in allowed:
        raise ConfigError(f"{key}: {value!r} is not one of {', '.join(map(str, allowed))}")
    return value


def parse_config_text(text: str, source: str = "<config>") -> dict[str, str]:
    """Flat ``key = value`` lines; ``#`` starts a comment."""
    out = {}
    for no, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{no}: expected 'key = value'")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in SCHEMA:
            raise ConfigError(f"{source}:{no}: unknown key {key!r}")
        out[key] = value
    return out


def resolve(overrides: dict | None = None) -> dict:
    """Defaults updated with ``overrides``, every value type-checked."""
    cfg = {k: v[0] for k, v in SCHEMA.items()}
    for key, value in (overrides or {}).items():
        if key not in SCHEMA:
            raise ConfigError(f"unknown key {key!r}")
        cfg[key] = _coerce(key, value)
    _validate(cfg)
    return cfg


def _validate(cfg: dict) -> None:
    positive = ["n", "classes", "epochs", "batch_size", "bucket_size", "qd_epochs",
                "redistribute_batches", "ns_bucket_size", "ns_trials", "float_bits"]
    for key in positive:
        if cfg[key] < 1:
            raise ConfigError(f"{key} must be >= 1")
    for key in ("lr", "qd_lr", "dq_lr", "temperature"):
        if not cfg[key] > 0:
            raise ConfigError(f"{key} must be > 0")
    if not 0 <= cfg["soft_weight"] <= 1:
        raise ConfigError("soft_weight must lie in [0, 1]")
    if not 0 <= cfg["test_fraction"] < 1:
        raise ConfigError("test_fraction must lie in [0, 1)")
    if not 1 <= cfg["bits"] <= 8:
        raise ConfigError("bits must lie in 1..8")
    if cfg["dq_iterations"] < 0:
        raise ConfigError("dq_iterations must be >= 0 (0 picks a tenth of full training)")
    if cfg["dataset"] == "csv" and not cfg["csv_path"]:
        raise ConfigError("dataset = csv needs csv_path")
    for key in ("teacher_hidden", "student_hidden", "ns_n", "ns_s"):
        int_list(cfg, key)


def int_list(cfg: dict, key: str) -> list[int]:
    text = str(cfg[key]).strip()
    if not text:
        return []
    try:
        values = [int(p) for p in text.split(",")]
    except ValueError:
        raise ConfigError(f"{key}: expected comma-separated integers, got {text!r}") from None
    if any(v < 1 for v in values):
        raise ConfigError(f"{key}: values must be >= 1")
    return values


def format_config(cfg: dict) -> str:
    lines = []
    for key in SCHEMA:
        value = cfg[key]
        lines.append(f"{key} = {str(value).lower() if isinstance(value, bool) else value}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------- stages

def load_data(cfg: dict) -> Dataset:
    if cfg["dataset"] == "csv":
        return load_csv(cfg["csv_path"], cfg["label_column"], cfg["test_fraction"], cfg["seed"])
    return synth_dataset(cfg["dataset"], cfg["n"], cfg["classes"], cfg["noise"], cfg["seed"],
                         cfg["test_fraction"])


def distill_config(cfg: dict) -> DistillationConfig:
    return DistillationConfig(cfg["temperature"], cfg["soft_weight"])


def architecture(cfg: dict, data: Dataset, role: str) -> list[int]:
    return [data.n_features, *int_list(cfg, f"{role}_hidden"), data.n_classes]


def init_student(cfg: dict, data: Dataset) -> Network:
    return nn.init_network(architecture(cfg, data, "student"), derive(cfg["seed"], STUDENT_KEY))


def train_teacher(cfg: dict, data: Dataset) -> tuple[Network, train.Metrics]:
    net = nn.init_network(architecture(cfg, data, "teacher"), derive(cfg["seed"], TEACHER_KEY))
    metrics = train.Metrics()
    tc = train.TrainConfig(cfg["epochs"], cfg["lr"], cfg["batch_size"], cfg["seed"])
    train.train_full_precision(net, data, tc, metrics=metrics)
    return net, metrics


def train_student(cfg: dict, data: Dataset, teacher: Network | None) -> tuple[Network, train.Metrics]:
    """Full-precision student; distilled when ``teacher`` is given."""
    net = init_student(cfg, data)
    metrics = train.Metrics()
    tc = train.TrainConfig(cfg["epochs"], cfg["lr"], cfg["batch_size"], cfg["seed"],
                           distill=distill_config(cfg) if teacher is not None else None)
    train.train_full_precision(net, data, tc, teacher=teacher, metrics=metrics)
    return net, metrics


def _check_exclusion(cfg: dict, net: Network) -> None:
    if cfg["exclude_ends"] and len(net.layers) < 3:
        raise ConfigError(f"exclude_ends needs at least 3 layers, the network has {len(net.layers)}")


def quantize_pm(cfg: dict, model: Network) -> QuantizedModel:
    _check_exclusion(cfg, model)
    return train.pm_quantize(model, cfg["bits"], cfg["bucketing"], cfg["bucket_size"], cfg["exclude_ends"])


def quantize_distill(cfg: dict, data: Dataset, teacher: Network | None,
                     start: Network | None = None) -> tuple[QuantizedModel, train.Metrics]:
    """Quantized training of a student; ``teacher=None`` gives the plain label
    loss. Training starts from a copy of ``start`` when given, else from a
    fresh initialisation."""
    qc = train.QDConfig(
        scheme=UniformScheme.from_bits(cfg["bits"], cfg["mode"]),
        bucket_size=cfg["bucket_size"],
        lr=cfg["qd_lr"],
        epochs=cfg["qd_epochs"],
        batch_size=cfg["batch_size"],
        distill=distill_config(cfg),
        seed=cfg["seed"],
        schedule=cfg["qd_schedule"],
        exclude_ends=cfg["exclude_ends"],
    )
    metrics = train.Metrics()
    student = start.copy() if start is not None else init_student(cfg, data)
    _check_exclusion(cfg, student)
    qm = train.quantized_distillation(student, teacher, data, qc, metrics)
    return qm, metrics


def dq_iterations(cfg: dict, data: Dataset) -> int:
    if cfg["dq_iterations"]:
        return cfg["dq_iterations"]
    per_epoch = -(-len(data.x_train) // cfg["batch_size"])
    return max(1, cfg["epochs"] * per_epoch // 10)


def quantize_diff(cfg: dict, data: Dataset, model: Network) -> tuple[train.DQResult, train.Metrics]:
    _check_exclusion(cfg, model)
    dc = train.DQConfig(
        bits_per_layer=cfg["bits"],
        bucket_size=cfg["bucket_size"],
        lr=cfg["dq_lr"],
        iterations=dq_iterations(cfg, data),
        batch_size=cfg["batch_size"],
        loss_kind=cfg["dq_loss"],
        init=cfg["dq_init"],
        redistribute=cfg["redistribute"],
        redistribute_batches=cfg["redistribute_batches"],
        distill=distill_config(cfg),
        seed=cfg["seed"],
        exclude_ends=cfg["exclude_ends"],
    )
    metrics = train.Metrics()
    return train.differentiable_quantization(model, data, dc, metrics), metrics


def noise_study_cells(cfg: dict) -> list[stats.NoiseStudyConfig]:
    dist = (cfg["ns_distribution"], cfg["ns_a"], cfg["ns_b"])
    return [
        stats.NoiseStudyConfig(n=n, s=s, bucket_size=cfg["ns_bucket_size"], trials=cfg["ns_trials"],
                               quantize_inputs=cfg["ns_quantize_inputs"], distribution=dist,
                               resample=cfg["ns_resample"], seed=cfg["seed"])
        for n in int_list(cfg, "ns_n")
        for s in int_list(cfg, "ns_s")
    ]


def run_noise_cell(cell: stats.NoiseStudyConfig) -> stats.Diagnostics:
    return stats.normality_diagnostics(stats.noise_samples(cell))


# ---------------------------------------------------------------- results

@dataclass
class Result:
    """One row of the summary table."""

    method: str
    bits: int
    accuracy: float
    plain_bits: int
    huffman_bits: int
    extra: dict = field(default_factory=dict)

    def as_dict(self) -> dict:
        return {"method": self.method, "bits": self.bits, "accuracy": self.accuracy,
                "plain_bits": self.plain_bits, "huffman_bits": self.huffman_bits, **self.extra}


def test_accuracy(net: Network, data: Dataset) -> float:
    return nn.accuracy(net, data.x_test, data.y_test)


def full_precision_result(method: str, net: Network, data: Dataset, f: int) -> Result:
    n = sum(l.weight.size for l in net.layers)
    return Result(method, f, test_accuracy(net, data), n * f, n * f)


def quantized_result(method: str, bits: int, qm: QuantizedModel, data: Dataset, f: int) -> Result:
    rep = qm.size_report(f)
    return Result(method, bits, test_accuracy(qm.network(), data), rep.quantized_bits, rep.huffman_bits,
                  {"gain_plain": rep.gain_plain, "gain_huffman": rep.gain_huffman,
                   "mean_code_length": rep.mean_code_length})


SUMMARY_HEADER = "method,bits,accuracy,plain_bytes,huffman_bytes,gain_plain,gain_huffman"


def summary_csv(rows: list[dict]) -> str:
    """Rows sorted by method then bits; sizes cover weight matrices only."""
    lines = [SUMMARY_HEADER]
    for r in sorted(rows, key=lambda r: (r["method"], r["bits"])):
        plain, huff = r["plain_bits"] / 8, r["huffman_bits"] / 8
        gp = r.get("gain_plain", 1.0)
        gh = r.get("gain_huffman", 1.0)
        lines.append(f"{r['method']},{r['bits']},{r['accuracy']:.6f},{plain:.2f},{huff:.2f},{gp:.4f},{gh:.4f}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------- desk recipe

@dataclass
class DeskRun:
    """Everything the desk-scale comparison needs for one seed."""

    data: Dataset
    teacher: Network
    plain: Network
    distilled: Network
    accuracy: dict[str, float] = field(default_factory=dict)


def desk_base(cfg: dict) -> DeskRun:
    data = load_data(cfg)
    teacher, _ = train_teacher(cfg, data)
    plain, _ = train_student(cfg, data, None)
    distilled, _ = train_student(cfg, data, teacher)
    run = DeskRun(data, teacher, plain, distilled)
    for name, net in (("teacher", teacher), ("plain", plain), ("distilled", distilled)):
        run.accuracy[name] = test_accuracy(net, data)
    return run


def with_overrides(cfg: dict, **kw) -> dict:
    out = dict(cfg)
    out.update(kw)
    _validate(out)
    return out


def qd_start(cfg: dict, run: DeskRun, loss: str) -> Network | None:
    if cfg["qd_init"] == "scratch":
        return None
    return run.distilled if loss == "distill" else run.plain


def method_ordering(cfg: dict, run: DeskRun | None = None) -> dict[str, float]:
    """Test accuracies for the desk-scale method comparison on one seed."""
    run = run or desk_base(cfg)
    data = run.data
    acc = dict(run.accuracy)
    pm2 = quantize_pm(with_overrides(cfg, bits=2, bucketing=False), run.plain)
    pm8 = quantize_pm(with_overrides(cfg, bits=8, bucketing=True), run.plain)
    acc["pm-nobucket-2"] = test_accuracy(pm2.network(), data)
    acc["pm-bucket-8"] = test_accuracy(pm8.network(), data)
    for loss, bits in (("distill", 2), ("normal", 2), ("distill", 4)):
        c = with_overrides(cfg, bits=bits, qd_loss=loss)
        teacher = run.teacher if loss == "distill" else None
        qm, _ = quantize_distill(c, data, teacher, qd_start(c, run, loss))
        acc[f"qd-{loss}-{bits}"] = test_accuracy(qm.network(), data)
    return acc


def dq_heuristics(cfg: dict, run: DeskRun | None = None, bits: int = 2) -> dict:
    """Differentiable quantization with redistribution on/off and both
    point initialisations."""
    run = run or desk_base(cfg)
    source = run.distilled if cfg["dq_source"] == "distilled" else run.plain
    out = {}
    for redistribute in (True, False):
        for init in ("quantile", "uniform"):
            c = with_overrides(cfg, bits=bits, redistribute=redistribute, dq_init=init)
            res, _ = quantize_diff(c, run.data, source)
            key = f"{'redist' if redistribute else 'noredist'}-{init}"
            out[key] = test_accuracy(res.model.network(), run.data)
            out[f"{key}-points"] = res.points_per_layer
    return out
