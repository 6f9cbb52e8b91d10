"""Command-line interface.

Subcommands: validate, run, eval, ablate, fixtures. Configuration comes from
built-in defaults, optionally a JSON config file, and repeatable
``--set section.key=value`` overrides; flags win over the file, the file wins
over defaults. Exit codes: 0 success, 1 data or validation failure, 2
environment or configuration failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from dataclasses import dataclass
from pathlib import Path

from . import dataset as ds
from .dataset import QUESTION_IDS, generate_fixtures, load_split, validate_split, write_split
from .errors import (
    ClientError,
    ConfigError,
    DatasetError,
    EmptyTable,
    MockScriptError,
    UnknownRecord,
    WardroundError,
)
from .llm_client import (
    DEFAULT_MAX_OUTPUT_TOKENS,
    DEFAULT_TIMEOUT_S,
    DEFAULT_TOP_P,
    LiveLLMClient,
    MockLLMClient,
    MockScript,
    load_mock_script,
)
from .metrics import (
    DEFAULT_ICD_TAU,
    DEFAULT_KEYPOINT_TAU,
    MetricsConfig,
    evaluate,
    load_icd_table,
    write_report,
)
from .pipeline import (
    PromptLibrary,
    RequestSettings,
    StageConfig,
    run_split,
    write_predictions,
    write_run_log,
    write_trace,
)
from .retrieval import STUB_EMBEDDER_DIM, HashingEmbedder, LiveEmbedder

MOCK_MODES = ("scripted", "echo_gold", "corrupt")
EMBEDDER_KINDS = ("hashing", "live")
EMBED_SCORE_CHOICES = ("none", "hashing", "live")

FRAMEWORK_VARIANTS: dict[str, dict] = {
    "full": {},
    "wo_backward": {"backward_on": False},
    "wo_reflection": {"reflection_on": False},
    "wo_refinement": {"refinement_on": False},
}
PROTOCOL_VARIANTS: dict[str, tuple[str, ...]] = {
    "wo_round1": ("Q3", "Q4", "Q5"),
    "wo_round2": ("Q1", "Q2", "Q4", "Q5"),
}


# --- configuration ---------------------------------------------------------------


@dataclass(frozen=True)
class EndpointConfig:
    """Live chat-completions endpoint. The API key is never part of the
    config; it is read from the WARDROUND_API_KEY environment variable."""

    base_url: str = ""
    model_name: str = "gpt-4o-mini"
    top_p: float = DEFAULT_TOP_P
    max_output_tokens: int = DEFAULT_MAX_OUTPUT_TOKENS
    timeout_s: float = DEFAULT_TIMEOUT_S


@dataclass(frozen=True)
class EmbedderConfig:
    kind: str = "hashing"
    dim: int = STUB_EMBEDDER_DIM
    base_url: str = ""
    model_name: str = "text-embedding-3-small"


@dataclass(frozen=True)
class MockConfig:
    enabled: bool = True
    mode: str = "echo_gold"
    script_path: str = ""


@dataclass(frozen=True)
class RunSection:
    use_icl: bool = True
    icl_k: int = 1
    backward_on: bool = True
    reflection_on: bool = True
    refinement_on: bool = True
    stage2_targets: tuple[str, ...] = ("Q1", "Q3", "Q4")
    regenerate_criteria: bool = True
    questions: tuple[str, ...] = QUESTION_IDS
    concurrency: int = 1
    allow_repair: bool = True
    include_raw: bool = False
    icl_pool_path: str = ""
    prompt_dir: str = ""


@dataclass(frozen=True)
class MetricsSection:
    icd_tau: float = DEFAULT_ICD_TAU
    keypoint_tau: float = DEFAULT_KEYPOINT_TAU
    embed: str = "hashing"


@dataclass(frozen=True)
class AppConfig:
    run: RunSection = RunSection()
    endpoint: EndpointConfig = EndpointConfig()
    mock: MockConfig = MockConfig()
    embedder: EmbedderConfig = EmbedderConfig()
    metrics: MetricsSection = MetricsSection()


_SECTIONS = {
    "run": RunSection,
    "endpoint": EndpointConfig,
    "mock": MockConfig,
    "embedder": EmbedderConfig,
    "metrics": MetricsSection,
}


def _default_config_dict() -> dict:
    return {name: dataclasses.asdict(cls()) for name, cls in _SECTIONS.items()}


def _merge_file(config: dict, path: str | Path) -> None:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from exc
    try:
        obj = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path} is not valid JSON: {exc.msg}") from exc
    if not isinstance(obj, dict):
        raise ConfigError(f"config file {path} must hold a JSON object")
    for section, values in obj.items():
        if section not in config:
            raise ConfigError(f"unknown config section {section!r}")
        if not isinstance(values, dict):
            raise ConfigError(f"config section {section!r} must be an object")
        for key, value in values.items():
            if key not in config[section]:
                raise ConfigError(f"unknown config key {section}.{key}")
            config[section][key] = value


def _apply_overrides(config: dict, overrides: list[str]) -> None:
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"--set needs section.key=value, got {item!r}")
        dotted, raw_value = item.split("=", 1)
        parts = dotted.split(".")
        if len(parts) != 2:
            raise ConfigError(f"--set key must be section.key, got {dotted!r}")
        section, key = parts
        if section not in config or key not in config[section]:
            raise ConfigError(f"unknown config key {dotted!r}")
        try:
            value = json.loads(raw_value)
        except json.JSONDecodeError:
            value = raw_value
        config[section][key] = value


def _build_section(name: str, cls, values: dict):
    coerced = dict(values)
    for f in dataclasses.fields(cls):
        if f.name in coerced and isinstance(coerced[f.name], list):
            coerced[f.name] = tuple(coerced[f.name])
    try:
        return cls(**coerced)
    except TypeError as exc:
        raise ConfigError(f"bad config section {name!r}: {exc}") from exc


def load_config(path: str | Path | None, overrides: list[str] | None = None) -> AppConfig:
    """Defaults <- config file <- --set overrides, then cross-checks."""
    config = _default_config_dict()
    if path is not None:
        _merge_file(config, path)
    _apply_overrides(config, overrides or [])
    app = AppConfig(**{
        name: _build_section(name, cls, config[name]) for name, cls in _SECTIONS.items()
    })
    _check_config(app)
    return app


def _check_config(app: AppConfig) -> None:
    if app.mock.mode not in MOCK_MODES:
        raise ConfigError(f"mock.mode must be one of {MOCK_MODES}, got {app.mock.mode!r}")
    if app.embedder.kind not in EMBEDDER_KINDS:
        raise ConfigError(
            f"embedder.kind must be one of {EMBEDDER_KINDS}, got {app.embedder.kind!r}")
    if app.metrics.embed not in EMBED_SCORE_CHOICES:
        raise ConfigError(
            f"metrics.embed must be one of {EMBED_SCORE_CHOICES}, got {app.metrics.embed!r}")
    if not app.mock.enabled and not app.endpoint.base_url:
        raise ConfigError("a live run needs endpoint.base_url (or enable the mock)")
    if app.mock.enabled and app.mock.mode == "scripted" and not app.mock.script_path:
        raise ConfigError("scripted mock needs mock.script_path")
    if app.run.concurrency < 1:
        raise ConfigError("run.concurrency must be >= 1")
    unknown = [q for q in app.run.questions if q not in QUESTION_IDS]
    if unknown:
        raise ConfigError(f"run.questions contains unknown ids {unknown}")
    if not app.run.questions:
        raise ConfigError("run.questions must not be empty")
    if not 0.0 < app.metrics.icd_tau <= 1.0:
        raise ConfigError("metrics.icd_tau must be in (0, 1]")
    if not 0.0 <= app.metrics.keypoint_tau < 1.0:
        raise ConfigError("metrics.keypoint_tau must be in [0, 1)")


def config_as_dict(app: AppConfig) -> dict:
    return {name: dataclasses.asdict(getattr(app, name)) for name in _SECTIONS}


def stage_config_from(app: AppConfig, **replacements) -> StageConfig:
    run = app.run
    kwargs = dict(
        use_icl=run.use_icl,
        icl_k=run.icl_k,
        backward_on=run.backward_on,
        reflection_on=run.reflection_on,
        refinement_on=run.refinement_on,
        stage2_targets=tuple(run.stage2_targets),
        regenerate_criteria=run.regenerate_criteria,
    )
    kwargs.update(replacements)
    return StageConfig(**kwargs)


# --- shared builders ---------------------------------------------------------------


def _load_dataset(path: str, name: str) -> ds.DatasetSplit:
    if not Path(path).exists():
        raise ConfigError(f"dataset file not found: {path}")
    return load_split(path, name)


def _build_client(app: AppConfig, split: ds.DatasetSplit):
    if app.mock.enabled:
        if app.mock.script_path:
            script = load_mock_script(app.mock.script_path)
        else:
            script = MockScript(mode=app.mock.mode, entries={})
        return MockLLMClient(script, split)
    return LiveLLMClient(
        base_url=app.endpoint.base_url,
        timeout_s=app.endpoint.timeout_s,
    )


def _build_run_embedder(app: AppConfig):
    if not (app.run.use_icl and app.run.icl_k > 0):
        return None
    if app.embedder.kind == "hashing":
        return HashingEmbedder(dim=app.embedder.dim)
    if app.mock.enabled:
        raise ConfigError("mock runs must stay offline; use embedder.kind=hashing")
    base_url = app.embedder.base_url or app.endpoint.base_url
    if not base_url:
        raise ConfigError("embedder.kind=live needs embedder.base_url")
    return LiveEmbedder(base_url=base_url, model_name=app.embedder.model_name)


def _build_score_embedder(app: AppConfig):
    if app.metrics.embed == "none":
        return None, "none"
    if app.metrics.embed == "hashing":
        return HashingEmbedder(dim=app.embedder.dim), f"hashing-{app.embedder.dim}"
    base_url = app.embedder.base_url
    if not base_url:
        raise ConfigError("metrics.embed=live needs embedder.base_url")
    provider = LiveEmbedder(base_url=base_url, model_name=app.embedder.model_name)
    return provider, f"live:{app.embedder.model_name}"


def _execute_run(
    app: AppConfig,
    split: ds.DatasetSplit,
    out_dir: Path,
    cfg: StageConfig,
    question_ids: tuple[str, ...],
):
    """One pipeline run plus its three artifacts; returns the RunResult."""
    pool = split
    if app.run.icl_pool_path:
        pool = _load_dataset(app.run.icl_pool_path, "train")
    client = _build_client(app, split)
    provider = _build_run_embedder(app)
    prompts = PromptLibrary(app.run.prompt_dir) if app.run.prompt_dir else None
    settings = RequestSettings(
        model_name=app.endpoint.model_name,
        top_p=app.endpoint.top_p,
        max_output_tokens=app.endpoint.max_output_tokens,
    )
    result = run_split(
        split, client, cfg,
        pool=pool, provider=provider, question_ids=question_ids,
        settings=settings, prompts=prompts,
        allow_repair=app.run.allow_repair, include_raw=app.run.include_raw,
        concurrency=app.run.concurrency,
    )
    out_dir.mkdir(parents=True, exist_ok=True)
    write_predictions(result, out_dir / "predictions.jsonl", include_raw=app.run.include_raw)
    write_trace(result, out_dir / "trace.jsonl")
    write_run_log(result, out_dir / "run_log.json")
    return result


def _evaluate_to_report(
    app: AppConfig,
    predictions_path: Path,
    split: ds.DatasetSplit,
    icd_path: str | None,
    question_ids: tuple[str, ...] = QUESTION_IDS,
):
    table = load_icd_table(icd_path) if icd_path else load_icd_table()
    provider, provider_name = _build_score_embedder(app)
    cfg = MetricsConfig(
        icd_tau=app.metrics.icd_tau,
        keypoint_tau=app.metrics.keypoint_tau,
        embed_provider=provider,
        embed_provider_name=provider_name,
    )
    return evaluate(predictions_path, split, table, cfg, question_ids=question_ids)


def _print_aggregate_table(aggregates: dict[str, float]) -> None:
    if not aggregates:
        print("no aggregates")
        return
    width = max(len(k) for k in aggregates)
    for name in sorted(aggregates):
        print(f"{name:<{width}}  {aggregates[name]:.4f}")


# --- subcommands --------------------------------------------------------------------


def cmd_validate(args) -> int:
    split = _load_dataset(args.dataset, args.name)
    violations = validate_split(split)
    if violations:
        for v in violations:
            print(f"{v.record_id}\t{v.field}\t{v.message}")
        print(f"FAIL: {len(violations)} violation(s) in {len(split.records)} record(s)")
        return 1
    print(f"OK: {len(split.records)} record(s), all invariants hold")
    return 0


def cmd_fixtures(args) -> int:
    if args.count < 1:
        raise ConfigError("--count must be >= 1")
    split = generate_fixtures(seed=args.seed, n=args.count, name=args.name)
    write_split(split, args.out)
    print(f"wrote {len(split.records)} record(s) to {args.out}")
    return 0


def cmd_run(args) -> int:
    app = load_config(args.config, args.set or [])
    split = _load_dataset(args.dataset, args.name)
    out_dir = Path(args.out)
    cfg = stage_config_from(app)
    result = _execute_run(app, split, out_dir, cfg, tuple(app.run.questions))
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "config_used.json", "w", encoding="utf-8") as fh:
        json.dump(config_as_dict(app), fh, ensure_ascii=False, indent=2, sort_keys=True)
        fh.write("\n")
    log = result.run_log()
    print(f"records: {log['records']}  calls: {log['trace_length']}  "
          f"failed_records: {len(log['failed_records'])}  "
          f"question_failures: {len(log['question_failures'])}")
    print(f"artifacts in {out_dir}: predictions.jsonl, trace.jsonl, "
          f"run_log.json, config_used.json")
    return 0


def cmd_eval(args) -> int:
    app = load_config(args.config, args.set or [])
    split = _load_dataset(args.dataset, args.name)
    if not Path(args.predictions).exists():
        raise ConfigError(f"predictions file not found: {args.predictions}")
    report = _evaluate_to_report(app, Path(args.predictions), split, args.icd)
    write_report(report, args.out)
    _print_aggregate_table(report.aggregates)
    counts = report.counts
    print(f"scored {counts['reference_questions']} reference question(s); "
          f"missing={counts['missing_predictions']} failed={counts['failed_predictions']}")
    print(f"report written to {args.out}")
    return 0


def cmd_ablate(args) -> int:
    app = load_config(args.config, args.set or [])
    split = _load_dataset(args.dataset, args.name)
    out_root = Path(args.out)

    variants: list[tuple[str, StageConfig, tuple[str, ...]]] = [
        (name, stage_config_from(app, **replacements), tuple(app.run.questions))
        for name, replacements in FRAMEWORK_VARIANTS.items()
    ]
    if args.protocol:
        variants.extend(
            (name, stage_config_from(app), qids)
            for name, qids in PROTOCOL_VARIANTS.items()
        )

    rows: dict[str, dict[str, float]] = {}
    for name, cfg, qids in variants:
        variant_dir = out_root / name
        _execute_run(app, split, variant_dir, cfg, qids)
        report = _evaluate_to_report(
            app, variant_dir / "predictions.jsonl", split, args.icd, question_ids=qids)
        write_report(report, variant_dir / "report.json")
        rows[name] = report.aggregates

    columns = sorted({metric for aggregates in rows.values() for metric in aggregates})
    name_width = max(len(n) for n in rows)
    widths = [max(len(c), 8) for c in columns]
    header = "  ".join([f"{'variant':<{name_width}}"] +
                       [f"{c:>{w}}" for c, w in zip(columns, widths)])
    print(header)
    for name, _, _ in variants:
        cells = []
        for column, w in zip(columns, widths):
            value = rows[name].get(column)
            cells.append(f"{'-':>{w}}" if value is None else f"{value:>{w}.4f}")
        print("  ".join([f"{name:<{name_width}}"] + cells))

    comparison = {"columns": columns, "rows": rows}
    with open(out_root / "comparison.json", "w", encoding="utf-8") as fh:
        json.dump(comparison, fh, ensure_ascii=False, indent=2, sort_keys=True)
        fh.write("\n")
    print(f"per-variant artifacts and comparison.json in {out_root}")
    return 0


# --- parser and entry point -----------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="wardround",
        description="Two-stage multi-round clinical diagnosis dialogue harness",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add_config_args(p):
        p.add_argument("--config", default=None, help="JSON config file")
        p.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE",
                       help="override one config key (repeatable)")

    p = sub.add_parser("validate", help="check a dataset file against the schema")
    p.add_argument("--dataset", required=True)
    p.add_argument("--name", default="test", choices=ds.SPLIT_NAMES)
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("run", help="run the dialogue pipeline over a dataset")
    p.add_argument("--dataset", required=True)
    p.add_argument("--name", default="test", choices=ds.SPLIT_NAMES)
    p.add_argument("--out", required=True, help="output directory")
    add_config_args(p)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("eval", help="score a predictions file against references")
    p.add_argument("--dataset", required=True)
    p.add_argument("--name", default="test", choices=ds.SPLIT_NAMES)
    p.add_argument("--predictions", required=True)
    p.add_argument("--out", required=True, help="report JSON path")
    p.add_argument("--icd", default=None, help="ICD code/term TSV (default: bundled)")
    add_config_args(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="run and score the framework ablation grid")
    p.add_argument("--dataset", required=True)
    p.add_argument("--name", default="test", choices=ds.SPLIT_NAMES)
    p.add_argument("--out", required=True, help="output directory (one subdir per variant)")
    p.add_argument("--icd", default=None)
    p.add_argument("--protocol", action="store_true",
                   help="also run the question-skipping protocol variants")
    add_config_args(p)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("fixtures", help="generate a synthetic dataset file")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--count", type=int, default=8)
    p.add_argument("--name", default="test", choices=ds.SPLIT_NAMES)
    p.set_defaults(func=cmd_fixtures)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except MockScriptError as exc:
        print(f"mock script error: {exc}", file=sys.stderr)
        return 1
    except (DatasetError, UnknownRecord, EmptyTable) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 1
    except ClientError as exc:
        print(f"client error: {exc}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(f"missing file: {exc}", file=sys.stderr)
        return 2
    except WardroundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entry()
