"""Batch command-line pipeline over the library.

Subcommands mirror the compression workflow: ``train-ref`` produces a
reference model directory, ``prune`` and ``curvature`` enrich it,
``quantize`` runs load -> (prune+compact) -> curvature -> cluster -> code
-> (fine-tune) -> evaluate and writes the encoded model plus a JSON report,
``sweep`` repeats that over a list of cluster counts or rate penalties into
a CSV, and ``report`` re-derives every number from an encoded model file.

Configuration is a flat ``key=value`` file overridden by flags; the fully
resolved configuration is written next to the outputs for provenance. Runs
are deterministic per (config, seed).

Exit codes: 0 ok, 2 configuration error, 3 I/O or format error,
4 constraint infeasible, 5 numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import math
import sys
from pathlib import Path

import numpy as np

from . import coding, params, quantizers, refnet
from .params import DivergenceError, FormatError, NetQuantError

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_INFEASIBLE = 4
EXIT_NUMERIC = 5

SWEEP_CSV_VERSION = "netquant-sweep-csv v1"
SWEEP_COLUMNS = [
    "index",
    "quantizer",
    "coding",
    "knob",
    "k_effective",
    "entropy_bits",
    "avg_codeword_bits",
    "ratio_exact",
    "accuracy_pre_ft",
    "accuracy_post_ft",
    "seed",
    "status",
]

QUANTIZERS = ("kmeans", "hw-kmeans", "uniform", "ecsq")
CURVATURES = ("exact", "gauss-newton", "adam", "identity")
CODINGS = ("fixed", "huffman")
REFNET_FILE = "refnet.json"


class ConfigError(NetQuantError):
    pass


class InfeasibleError(NetQuantError):
    pass


# ---------------------------------------------------------------------------
# Configuration plumbing
# ---------------------------------------------------------------------------


def _parse_bool(text: str) -> bool:
    lowered = str(text).strip().lower()
    if lowered in ("1", "true", "yes", "on"):
        return True
    if lowered in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"expected a boolean, got {text!r}")


def _parse_int_list(text: str) -> list[int]:
    return [int(x) for x in str(text).split(",") if x.strip() != ""]


def _parse_float_list(text: str) -> list[float]:
    return [float(x) for x in str(text).split(",") if x.strip() != ""]


# key -> (default, parser). Everything lands in one flat namespace shared
# by the config file and the flags.
OPTION_TABLE: dict[str, tuple[object, object]] = {
    "model_dir": (None, str),
    "dataset": (None, str),
    "out_dir": (None, str),
    "quantizer": ("kmeans", str),
    "curvature": ("identity", str),
    "coding": ("huffman", str),
    "k": (None, int),
    "target_ratio": (None, float),
    "lam": (None, float),
    "prune_fraction": (0.0, float),
    "fine_tune": (False, _parse_bool),
    "seed": (0, int),
    "center_rule": ("mean", str),
    "init": ("linspace", str),
    "hessian_samples": (0, int),
    "k_list": (None, _parse_int_list),
    "lambda_list": (None, _parse_float_list),
    "quantizers": (None, str),
    # train-ref
    "hidden": ("32", _parse_int_list),
    "activation": ("relu", str),
    "loss": ("softmax_cross_entropy", str),
    "steps": (500, int),
    "batch_size": (64, int),
    "lr": (0.01, float),
    "model_name": ("refnet", str),
    # fine-tune
    "ft_steps": (200, int),
    "ft_batch_size": (64, int),
    "ft_lr": (1e-5, float),
    # synthetic dataset
    "synth_samples": (2000, int),
    "synth_classes": (4, int),
    "synth_features": (10, int),
    "synth_noise": (1.0, float),
    "synth_spread": (3.0, float),
    "synth_scale": (1.0, float),
    "synth_seed": (0, int),
    "eval_frac": (0.3, float),
    # report
    "model_nq": (None, str),
    "out": (None, str),
}


def _read_config_file(path: str) -> dict:
    values = {}
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from exc
    for lineno, line in enumerate(text.splitlines(), 1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise ConfigError(f"{path}:{lineno}: expected key=value")
        key, _, raw = stripped.partition("=")
        key = key.strip().replace("-", "_")
        if key not in OPTION_TABLE:
            raise ConfigError(f"{path}:{lineno}: unknown key {key!r}")
        values[key] = raw.strip()
    return values


def _resolve_config(args: argparse.Namespace) -> dict:
    """defaults <- config file <- explicit flags, with parsing and checks."""
    cfg = {key: default for key, (default, _) in OPTION_TABLE.items()}
    if getattr(args, "config", None):
        for key, raw in _read_config_file(args.config).items():
            _, parse = OPTION_TABLE[key]
            try:
                cfg[key] = parse(raw)
            except (ValueError, TypeError) as exc:
                raise ConfigError(f"config key {key}: {exc}") from exc
    for key in OPTION_TABLE:
        flag_value = getattr(args, key, None)
        if flag_value is not None:
            _, parse = OPTION_TABLE[key]
            try:
                cfg[key] = parse(flag_value)
            except (ValueError, TypeError) as exc:
                raise ConfigError(f"flag --{key.replace('_', '-')}: {exc}") from exc
    return cfg


def _config_text(cfg: dict) -> str:
    lines = [f"# resolved configuration ({SWEEP_CSV_VERSION.split()[0]})"]
    for key in sorted(cfg):
        value = cfg[key]
        if value is None:
            continue
        if isinstance(value, bool):
            value = "true" if value else "false"
        elif isinstance(value, list):
            value = ",".join(str(x) for x in value)
        lines.append(f"{key}={value}")
    return "\n".join(lines) + "\n"


def _require(cfg: dict, key: str, why: str):
    if cfg.get(key) is None:
        raise ConfigError(f"{why} requires --{key.replace('_', '-')}")
    return cfg[key]


def _check_enum(cfg: dict, key: str, allowed: tuple) -> str:
    value = cfg[key]
    if value not in allowed:
        raise ConfigError(f"{key} must be one of {', '.join(allowed)}; got {value!r}")
    return value


# ---------------------------------------------------------------------------
# Dataset and reference-net helpers
# ---------------------------------------------------------------------------


def _synth_dataset(cfg: dict) -> refnet.Dataset:
    return refnet.make_blobs(
        n_samples=cfg["synth_samples"],
        n_classes=cfg["synth_classes"],
        n_features=cfg["synth_features"],
        seed=cfg["synth_seed"],
        center_spread=cfg["synth_spread"],
        noise=cfg["synth_noise"],
        input_scale=cfg["synth_scale"],
        eval_frac=cfg["eval_frac"],
    )


def _load_dataset(cfg: dict, refnet_doc: dict | None) -> refnet.Dataset:
    name = _require(cfg, "dataset", "this command")
    if name == "synth":
        if refnet_doc and "dataset" in refnet_doc:
            stored = dict(cfg)
            stored.update(refnet_doc["dataset"])
            return _synth_dataset(stored)
        return _synth_dataset(cfg)
    path = Path(name)
    if not path.is_file():
        raise ConfigError(f"dataset file not found: {path}")
    return refnet.load_csv(path, eval_frac=cfg["eval_frac"], seed=cfg["synth_seed"])


def _read_refnet_doc(model_dir: Path) -> dict | None:
    path = model_dir / REFNET_FILE
    if not path.is_file():
        return None
    try:
        return json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path} is not valid JSON: {exc}") from exc


def _spec_from_doc(doc: dict) -> refnet.MlpSpec:
    try:
        return refnet.MlpSpec(
            tuple(doc["layer_widths"]), doc["activation"], doc["loss"]
        )
    except (KeyError, ValueError, TypeError) as exc:
        raise FormatError(f"bad {REFNET_FILE}: {exc}") from exc


def _hessian_batch(ds: refnet.Dataset, cap: int) -> tuple[np.ndarray, np.ndarray]:
    x, y = ds.split("hessian")
    if cap and cap < x.shape[0]:
        x, y = x[:cap], y[:cap]
    return x, y


# ---------------------------------------------------------------------------
# Shared pipeline pieces
# ---------------------------------------------------------------------------


def _round_codebook_f32(codebook: quantizers.Codebook) -> quantizers.Codebook:
    # Stored centers are float32; round once so every downstream number
    # (accuracy, encoded artifact) describes the same model.
    return quantizers.Codebook(
        codebook.centers.astype(np.float32).astype(np.float64), codebook.counts
    )


def _quantize_values(values, curvature, cfg: dict, knob=None):
    """Run the configured quantizer; returns (assignment, codebook, extras)."""
    quantizer = cfg["quantizer"]
    extras: dict = {}
    if quantizer == "uniform":
        k = int(knob if knob is not None else _require(cfg, "k", "uniform"))
        rule = _check_enum(cfg, "center_rule", ("mean", "hessian_weighted_mean"))
        res = quantizers.uniform_quantize(values, curvature, k=k, center_rule=rule)
    elif quantizer == "kmeans":
        k = int(knob if knob is not None else _require(cfg, "k", "kmeans"))
        res = quantizers.kmeans_lloyd(
            values,
            quantizers.ClusterConfig(k=k, init=cfg["init"], seed=cfg["seed"]),
        )
    elif quantizer == "hw-kmeans":
        k = int(knob if knob is not None else _require(cfg, "k", "hw-kmeans"))
        res = quantizers.hw_kmeans_lloyd(
            values,
            curvature,
            quantizers.ClusterConfig(k=k, init=cfg["init"], seed=cfg["seed"]),
        )
    elif quantizer == "ecsq":
        if cfg["target_ratio"] is not None:
            if cfg["k"] is not None or knob is not None:
                raise ConfigError("ecsq takes either k (with lam) or target_ratio")
            source_bits = 32
            budget = source_bits / cfg["target_ratio"]
            k = int(min(64, max(2, 2 ** (math.ceil(budget) + 1))))
            extras["entropy_budget"] = budget
            if budget >= math.log2(k):
                res = quantizers.ecsq_iterate(
                    values,
                    curvature,
                    quantizers.EcsqConfig(
                        k=k, init=cfg["init"], seed=cfg["seed"], lam=0.0
                    ),
                )
                extras["lambda"] = 0.0
            else:
                found = quantizers.solve_lambda(
                    values,
                    curvature,
                    k=k,
                    target_entropy=budget,
                    init=cfg["init"],
                    seed=cfg["seed"],
                )
                if not found.met:
                    raise InfeasibleError(
                        f"entropy budget {budget:.4f} bits not met "
                        f"(achieved {found.entropy:.4f})"
                    )
                res = found.result
                extras["lambda"] = found.lam
        else:
            lam = float(knob if knob is not None else (cfg["lam"] or 0.0))
            k = int(_require(cfg, "k", "ecsq with an explicit lam"))
            extras["lambda"] = lam
            res = quantizers.ecsq_iterate(
                values,
                curvature,
                quantizers.EcsqConfig(k=k, init=cfg["init"], seed=cfg["seed"], lam=lam),
            )
    else:
        raise ConfigError(f"unknown quantizer {quantizer!r}")
    assignment, codebook = quantizers.compact_codebook(res.assignment, res.codebook)
    return assignment, _round_codebook_f32(codebook), extras


def _build_code(scheme: str, codebook: quantizers.Codebook) -> coding.PrefixCode:
    if scheme == "fixed":
        return coding.fixed_length_code(codebook.k)
    return coding.build_huffman(codebook)


def _resolve_curvature(
    cfg: dict,
    values_full: np.ndarray,
    stored: params.CurvatureDiag | None,
    spec: refnet.MlpSpec | None,
    dataset: refnet.Dataset | None,
) -> params.CurvatureDiag:
    """Curvature for the full (pre-compaction) parameter vector."""
    source = _check_enum(cfg, "curvature", CURVATURES)
    if source == "identity":
        return refnet.identity_curvature(values_full.size)
    if source == "adam":
        if stored is None or stored.source != params.CurvatureSource.ADAM_SQRT_MOMENT:
            raise ConfigError(
                "curvature=adam needs a model directory with stored "
                "adam_sqrt_moment curvature (run train-ref)"
            )
        return stored
    if spec is None or dataset is None:
        raise ConfigError(f"curvature={source} needs a dataset and {REFNET_FILE}")
    x, y = _hessian_batch(dataset, cfg["hessian_samples"])
    if source == "exact":
        return refnet.hessian_diag_exact(spec, values_full, x, y)
    return refnet.hessian_diag_gn(spec, values_full, x, y)


def _run_quantize_point(cfg: dict, prepared: dict, knob=None) -> dict:
    """One full quantize -> code -> (fine-tune) -> evaluate pass, in memory."""
    spec = prepared["spec"]
    dataset = prepared["dataset"]
    values_q = prepared["values_q"]
    curvature_q = prepared["curvature_q"]
    positions = prepared["positions"]
    total_params = prepared["total_params"]
    scheme = _check_enum(cfg, "coding", CODINGS)

    assignment, codebook, extras = _quantize_values(values_q, curvature_q, cfg, knob)
    code = _build_code(scheme, codebook)
    kwargs = {}
    if prepared["pruned"]:
        kwargs = {"positions": positions, "total_params": total_params}
    encoded = coding.encode_assignments(assignment, codebook, code, **kwargs)

    accuracy_pre = None
    accuracy_post = None
    encoded_preft = None
    if spec is not None and dataset is not None:
        eval_x, eval_y = dataset.split("eval")
        w_pre = quantizers.scatter_dequantize(
            total_params, assignment, codebook, positions if prepared["pruned"] else None
        )
        accuracy_pre = refnet.eval_accuracy(spec, w_pre, eval_x, eval_y)

        if cfg["fine_tune"]:
            encoded_preft = encoded
            tuned, _ = refnet.fine_tune_centers(
                spec,
                prepared["ps_full"],
                assignment,
                codebook,
                dataset,
                refnet.FineTuneConfig(
                    steps=cfg["ft_steps"],
                    batch_size=cfg["ft_batch_size"],
                    lr=cfg["ft_lr"],
                    seed=cfg["seed"],
                ),
                positions=positions if prepared["pruned"] else None,
            )
            codebook = _round_codebook_f32(tuned)
            encoded = coding.encode_assignments(assignment, codebook, code, **kwargs)
            w_post = quantizers.scatter_dequantize(
                total_params,
                assignment,
                codebook,
                positions if prepared["pruned"] else None,
            )
            accuracy_post = refnet.eval_accuracy(spec, w_post, eval_x, eval_y)
    elif cfg["fine_tune"]:
        raise ConfigError("fine_tune needs a dataset and a model with refnet.json")

    report = coding.build_report(
        encoded, codebook.counts, code, accuracy_pre, accuracy_post
    )
    return {
        "assignment": assignment,
        "codebook": codebook,
        "code": code,
        "encoded": encoded,
        "encoded_preft": encoded_preft,
        "report": report,
        "extras": extras,
    }


def _prepare_inputs(cfg: dict, need_dataset: bool) -> dict:
    """Load the model directory and derive the quantizer inputs."""
    model_dir = Path(_require(cfg, "model_dir", "this command"))
    ps, stored_cv, stored_mask = params.load_model(model_dir)
    refnet_doc = _read_refnet_doc(model_dir)
    spec = _spec_from_doc(refnet_doc) if refnet_doc else None

    dataset = None
    if cfg.get("dataset") is not None:
        dataset = _load_dataset(cfg, refnet_doc)
        if spec is not None and dataset.n_features != spec.layer_widths[0]:
            raise ConfigError("dataset feature width disagrees with the model spec")
    elif need_dataset:
        raise ConfigError("this command requires --dataset")

    fraction = cfg["prune_fraction"]
    if fraction:
        mask = refnet.prune_magnitude(ps, fraction)
    else:
        mask = stored_mask
    pruned = mask is not None

    values_full = ps.as_f64()
    if pruned:
        values_full = values_full * mask.kept

    curvature_full = _resolve_curvature(cfg, values_full, stored_cv, spec, dataset)

    if pruned:
        ps_masked = params.ParamSet(values_full, ps.spans, ps.source_bits)
        ps_q, cv_q, positions = params.compact_unpruned(ps_masked, curvature_full, mask)
        values_q = ps_q.as_f64()
    else:
        positions = np.arange(ps.n, dtype=np.int64)
        values_q = values_full
        cv_q = curvature_full

    return {
        "model_dir": model_dir,
        "ps_full": ps,
        "spec": spec,
        "dataset": dataset,
        "values_q": values_q,
        "curvature_q": cv_q,
        "positions": positions,
        "total_params": ps.n,
        "pruned": pruned,
        "mask": mask,
    }


def _write_outputs(out_dir: Path, files: dict) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    for name, content in files.items():
        path = out_dir / name
        if isinstance(content, bytes):
            path.write_bytes(content)
        else:
            path.write_text(content)


def _report_doc(cfg: dict, prepared: dict, point: dict) -> dict:
    report = point["report"].as_dict()
    doc = {
        "quantizer": cfg["quantizer"],
        "coding": cfg["coding"],
        "seed": cfg["seed"],
        "n_params_total": prepared["total_params"],
        "pruned": prepared["pruned"],
        "prune_fraction": cfg["prune_fraction"],
    }
    if prepared["pruned"]:
        em = point["encoded"]
        doc["ratio_overall"] = prepared["total_params"] * em.source_bits / em.total_bits
    doc.update(point["extras"])
    doc.update(report)
    return doc


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def cmd_train_ref(args) -> int:
    cfg = _resolve_config(args)
    out_dir = Path(_require(cfg, "out_dir", "train-ref"))
    dataset = _load_dataset(cfg, None)
    _check_enum(cfg, "activation", refnet.ACTIVATIONS)
    _check_enum(cfg, "loss", refnet.LOSSES)
    widths = (dataset.n_features, *cfg["hidden"], dataset.n_classes)
    spec = refnet.MlpSpec(widths, cfg["activation"], cfg["loss"])
    model = refnet.train_adam(
        spec,
        dataset,
        refnet.TrainConfig(
            steps=cfg["steps"],
            batch_size=cfg["batch_size"],
            lr=cfg["lr"],
            seed=cfg["seed"],
        ),
    )
    curvature = refnet.adam_curvature(model.adam)
    params.save_model(
        model.params, out_dir, curvature=curvature, model_name=cfg["model_name"]
    )
    doc = {
        "layer_widths": list(widths),
        "activation": cfg["activation"],
        "loss": cfg["loss"],
        "seed": cfg["seed"],
        "train": {
            "steps": cfg["steps"],
            "batch_size": cfg["batch_size"],
            "lr": cfg["lr"],
        },
    }
    if cfg["dataset"] == "synth":
        doc["dataset"] = {
            key: cfg[key]
            for key in (
                "synth_samples",
                "synth_classes",
                "synth_features",
                "synth_noise",
                "synth_spread",
                "synth_scale",
                "synth_seed",
                "eval_frac",
            )
        }
    (out_dir / REFNET_FILE).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    (out_dir / "config.txt").write_text(_config_text(cfg))
    summary = {
        "n_params": model.params.n,
        "final_loss": model.final_loss,
        "eval_accuracy": model.eval_accuracy,
        "out_dir": str(out_dir),
    }
    print(json.dumps(summary, indent=2, sort_keys=True))
    return EXIT_OK


def cmd_prune(args) -> int:
    cfg = _resolve_config(args)
    model_dir = Path(_require(cfg, "model_dir", "prune"))
    fraction = cfg["prune_fraction"]
    if not 0.0 < fraction < 1.0:
        raise ConfigError("prune needs 0 < --prune-fraction < 1")
    ps, curvature, _ = params.load_model(model_dir)
    mask = refnet.prune_magnitude(ps, fraction)
    out_dir = Path(cfg["out_dir"]) if cfg["out_dir"] else model_dir
    manifest = params.read_manifest(model_dir)
    params.save_model(
        ps, out_dir, curvature=curvature, mask=mask, model_name=manifest.model_name
    )
    doc = _read_refnet_doc(model_dir)
    if doc is not None and out_dir != model_dir:
        (out_dir / REFNET_FILE).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    print(
        json.dumps(
            {"n_params": ps.n, "n_kept": mask.n_kept, "out_dir": str(out_dir)},
            indent=2,
            sort_keys=True,
        )
    )
    return EXIT_OK


def cmd_curvature(args) -> int:
    cfg = _resolve_config(args)
    model_dir = Path(_require(cfg, "model_dir", "curvature"))
    source = _check_enum(cfg, "curvature", CURVATURES)
    if source == "adam":
        raise ConfigError("adam curvature is captured by train-ref, not recomputed")
    ps, _, mask = params.load_model(model_dir)
    refnet_doc = _read_refnet_doc(model_dir)
    if source == "identity":
        curvature = refnet.identity_curvature(ps.n)
    else:
        if refnet_doc is None:
            raise ConfigError(f"curvature={source} needs {REFNET_FILE} in the model dir")
        spec = _spec_from_doc(refnet_doc)
        dataset = _load_dataset(cfg, refnet_doc)
        x, y = _hessian_batch(dataset, cfg["hessian_samples"])
        values = ps.as_f64()
        if mask is not None:
            values = values * mask.kept
        if source == "exact":
            curvature = refnet.hessian_diag_exact(spec, values, x, y)
        else:
            curvature = refnet.hessian_diag_gn(spec, values, x, y)
    out_dir = Path(cfg["out_dir"]) if cfg["out_dir"] else model_dir
    manifest = params.read_manifest(model_dir)
    params.save_model(
        ps, out_dir, curvature=curvature, mask=mask, model_name=manifest.model_name
    )
    if refnet_doc is not None and out_dir != model_dir:
        (out_dir / REFNET_FILE).write_text(
            json.dumps(refnet_doc, indent=2, sort_keys=True) + "\n"
        )
    print(
        json.dumps(
            {"source": curvature.source.value, "out_dir": str(out_dir)},
            indent=2,
            sort_keys=True,
        )
    )
    return EXIT_OK


def cmd_quantize(args) -> int:
    cfg = _resolve_config(args)
    out_dir = Path(_require(cfg, "out_dir", "quantize"))
    _check_enum(cfg, "quantizer", QUANTIZERS)
    _check_enum(cfg, "coding", CODINGS)
    if cfg["quantizer"] == "ecsq":
        if (cfg["k"] is None) == (cfg["target_ratio"] is None):
            raise ConfigError("ecsq needs exactly one of --k or --target-ratio")
    prepared = _prepare_inputs(cfg, need_dataset=False)
    point = _run_quantize_point(cfg, prepared)

    doc = _report_doc(cfg, prepared, point)
    files = {
        "model.nq": point["encoded"].data,
        "report.json": json.dumps(doc, indent=2, sort_keys=True) + "\n",
        "config.txt": _config_text(cfg),
    }
    if point["encoded_preft"] is not None:
        files["model_preft.nq"] = point["encoded_preft"].data
    _write_outputs(out_dir, files)
    print(json.dumps(doc, indent=2, sort_keys=True))
    return EXIT_OK


def _sweep_points(cfg: dict) -> list[tuple[str, object]]:
    quantizer_list = [
        q.strip() for q in (cfg["quantizers"] or cfg["quantizer"]).split(",")
    ]
    points = []
    for quantizer in quantizer_list:
        if quantizer not in QUANTIZERS:
            raise ConfigError(f"unknown quantizer {quantizer!r} in sweep")
        if quantizer == "ecsq":
            knobs = cfg["lambda_list"]
            if not knobs:
                raise ConfigError("sweeping ecsq needs --lambda-list")
        else:
            knobs = cfg["k_list"]
            if not knobs:
                raise ConfigError(f"sweeping {quantizer} needs --k-list")
        points.extend((quantizer, knob) for knob in knobs)
    return points


def cmd_sweep(args) -> int:
    cfg = _resolve_config(args)
    out_dir = Path(_require(cfg, "out_dir", "sweep"))
    _check_enum(cfg, "coding", CODINGS)
    points = _sweep_points(cfg)
    if not points:
        raise ConfigError("sweep needs at least one point")
    prepared = _prepare_inputs(cfg, need_dataset=False)

    buffer = io.StringIO()
    buffer.write(f"# {SWEEP_CSV_VERSION}\n")
    writer = csv.DictWriter(buffer, fieldnames=SWEEP_COLUMNS, lineterminator="\n")
    writer.writeheader()
    for index, (quantizer, knob) in enumerate(points):
        point_cfg = dict(cfg)
        point_cfg["quantizer"] = quantizer
        if quantizer == "ecsq":
            point_cfg["target_ratio"] = None
            if point_cfg["k"] is None:
                point_cfg["k"] = 8
        row = {
            "index": index,
            "quantizer": quantizer,
            "coding": cfg["coding"],
            "knob": f"{knob:.10g}",
            "seed": cfg["seed"],
            "status": "ok",
        }
        try:
            point = _run_quantize_point(point_cfg, prepared, knob=knob)
            report = point["report"]
            row.update(
                k_effective=report.k_effective,
                entropy_bits=f"{report.entropy_bits:.10g}",
                avg_codeword_bits=f"{report.avg_codeword_bits:.10g}",
                ratio_exact=f"{report.ratio_exact:.10g}",
                accuracy_pre_ft=(
                    ""
                    if report.accuracy_pre_finetune is None
                    else f"{report.accuracy_pre_finetune:.10g}"
                ),
                accuracy_post_ft=(
                    ""
                    if report.accuracy_post_finetune is None
                    else f"{report.accuracy_post_finetune:.10g}"
                ),
            )
        except (NetQuantError, ValueError) as exc:
            row.update(
                k_effective="",
                entropy_bits="",
                avg_codeword_bits="",
                ratio_exact="",
                accuracy_pre_ft="",
                accuracy_post_ft="",
                status=f"error:{type(exc).__name__}",
            )
        writer.writerow(row)

    _write_outputs(out_dir, {"sweep.csv": buffer.getvalue(), "config.txt": _config_text(cfg)})
    print(str(out_dir / "sweep.csv"))
    return EXIT_OK


def cmd_report(args) -> int:
    cfg = _resolve_config(args)
    nq_path = Path(_require(cfg, "model_nq", "report"))
    if not nq_path.is_file():
        raise FormatError(f"no encoded model at {nq_path}")
    decoded = coding.decode_assignments(nq_path.read_bytes())

    accuracy = None
    if cfg.get("dataset") is not None and cfg.get("model_dir") is not None:
        model_dir = Path(cfg["model_dir"])
        refnet_doc = _read_refnet_doc(model_dir)
        if refnet_doc is None:
            raise ConfigError(f"accuracy evaluation needs {REFNET_FILE} in the model dir")
        spec = _spec_from_doc(refnet_doc)
        dataset = _load_dataset(cfg, refnet_doc)
        w = quantizers.scatter_dequantize(
            decoded.total_params,
            decoded.assignment,
            decoded.codebook,
            decoded.positions,
        )
        eval_x, eval_y = dataset.split("eval")
        accuracy = refnet.eval_accuracy(spec, w, eval_x, eval_y)

    em = coding.EncodedModel(
        data=nq_path.read_bytes(),
        scheme=decoded.code.scheme,
        k=decoded.codebook.k,
        n_params=int(decoded.assignment.size),
        source_bits=decoded.source_bits,
        total_params=decoded.total_params,
        breakdown=decoded.breakdown,
    )
    report = coding.build_report(em, decoded.codebook.counts, decoded.code, accuracy)
    doc = report.as_dict()
    doc["accuracy"] = accuracy
    del doc["accuracy_pre_finetune"], doc["accuracy_post_finetune"]
    doc["n_params_total"] = decoded.total_params
    if decoded.positions is not None:
        doc["ratio_overall"] = decoded.total_params * em.source_bits / em.total_bits
    text = json.dumps(doc, indent=2, sort_keys=True)
    print(text)
    if cfg["out"]:
        Path(cfg["out"]).write_text(text + "\n")
    return EXIT_OK


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------


def _add_options(parser: argparse.ArgumentParser, keys: list[str]) -> None:
    parser.add_argument("--config", help="flat key=value configuration file")
    for key in keys:
        flag = "--" + key.replace("_", "-")
        parser.add_argument(flag, dest=key, default=None, metavar="V")


_COMMON = ["model_dir", "dataset", "out_dir", "seed", "eval_frac"]
_SYNTH = [
    "synth_samples",
    "synth_classes",
    "synth_features",
    "synth_noise",
    "synth_spread",
    "synth_scale",
    "synth_seed",
]
_QUANT = [
    "quantizer",
    "curvature",
    "coding",
    "k",
    "target_ratio",
    "lam",
    "prune_fraction",
    "fine_tune",
    "center_rule",
    "init",
    "hessian_samples",
    "ft_steps",
    "ft_batch_size",
    "ft_lr",
]


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="netquant",
        description="Codebook quantization and entropy coding for network parameters",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train-ref", help="train the reference MLP and save a model dir")
    _add_options(
        p,
        _COMMON
        + _SYNTH
        + ["hidden", "activation", "loss", "steps", "batch_size", "lr", "model_name"],
    )
    p.set_defaults(func=cmd_train_ref)

    p = sub.add_parser("prune", help="add a magnitude prune mask to a model dir")
    _add_options(p, _COMMON + _SYNTH + ["prune_fraction"])
    p.set_defaults(func=cmd_prune)

    p = sub.add_parser("curvature", help="compute and store a curvature vector")
    _add_options(p, _COMMON + _SYNTH + ["curvature", "hessian_samples"])
    p.set_defaults(func=cmd_curvature)

    p = sub.add_parser("quantize", help="run the full compression pipeline")
    _add_options(p, _COMMON + _SYNTH + _QUANT)
    p.set_defaults(func=cmd_quantize)

    p = sub.add_parser("sweep", help="quantize over a list of k or lambda values")
    _add_options(p, _COMMON + _SYNTH + _QUANT + ["k_list", "lambda_list", "quantizers"])
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("report", help="recompute every number from an encoded model")
    _add_options(p, _COMMON + _SYNTH + ["model_nq", "out"])
    p.set_defaults(func=cmd_report)

    return parser


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except InfeasibleError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE
    except (FormatError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (DivergenceError, FloatingPointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
