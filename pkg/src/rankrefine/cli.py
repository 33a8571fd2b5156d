"""Command-line entry point: run, rerank, regularize, inspect.

Configuration precedence is flags > config file > built-in defaults.
Every error maps to a stable category name and exit code so callers can
script against failures.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from pathlib import Path

from .backends.base import BackendEndpoint, Backends
from .backends.http import (
    HttpEmbeddingProvider,
    HttpImageGenerator,
    HttpImageRefiner,
    HttpLayoutProvider,
)
from .backends.sim import make_sim_backends
from .engine import PipelineConfig, RunManifest, run_pipeline, select_final
from .errors import (
    AllGenerationFailed,
    BackendError,
    ConfigError,
    LayoutPhaseFailed,
    ManifestError,
    ParseFailed,
    RankRefineError,
    RepairFailed,
)
from .layout import parse_layout_response, regularize_layout, layout_to_wire

logger = logging.getLogger(__name__)

AUTH_TOKEN_ENV = "RANKREFINE_API_TOKEN"

# Most specific first; every category gets a stable exit code.
_EXIT_CODES: list[tuple[type[Exception], int]] = [
    (ConfigError, 2),
    (LayoutPhaseFailed, 3),
    (AllGenerationFailed, 4),
    (ManifestError, 5),
    (ParseFailed, 6),  # includes CoordinateError
    (RepairFailed, 7),
    (BackendError, 8),
    (RankRefineError, 1),
]

_CONFIG_FLAGS = {
    "n_drafts": "--n-drafts",
    "k_keep": "--k-keep",
    "m_variants": "--m-variants",
    "lambda": "--lambda",
    "delta": "--delta",
    "rounds": "--rounds",
    "alpha_refine": "--alpha-refine",
    "gen_steps": "--gen-steps",
    "gen_guidance": "--gen-guidance",
    "refine_guidance": "--refine-guidance",
    "base_seed": "--seed",
    "retry_budget": "--retry-budget",
    "image_size": "--image-size",
    "parallelism": "--parallelism",
}


def _add_config_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", type=Path, help="JSON config file (PipelineConfig fields)")
    parser.add_argument("--n-drafts", type=int)
    parser.add_argument("--k-keep", type=int)
    parser.add_argument("--m-variants", type=int)
    parser.add_argument("--lambda", type=float, dest="lambda_", metavar="LAMBDA")
    parser.add_argument("--delta", type=float)
    parser.add_argument("--rounds", type=int)
    parser.add_argument("--alpha-refine", type=float)
    parser.add_argument("--gen-steps", type=int)
    parser.add_argument("--gen-guidance", type=float)
    parser.add_argument("--refine-guidance", type=float)
    parser.add_argument("--seed", type=int, dest="base_seed")
    parser.add_argument("--retry-budget", type=int)
    parser.add_argument("--image-size", type=int)
    parser.add_argument("--parallelism", type=int)
    parser.add_argument(
        "--no-retain-incumbents",
        action="store_true",
        help="drop pre-refinement candidates from later pools (ablation)",
    )


def _add_backend_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--backend", choices=["sim", "http"], default="sim")
    parser.add_argument("--endpoint-url", help="base URL for all four backend endpoints")
    parser.add_argument("--layout-url")
    parser.add_argument("--generate-url")
    parser.add_argument("--refine-url")
    parser.add_argument("--embed-url")
    parser.add_argument("--http-timeout", type=float, default=60.0)
    parser.add_argument("--http-retries", type=int, default=2)
    parser.add_argument("--sim-sigma", type=float, default=0.08)
    parser.add_argument("--sim-dropout", type=float, default=0.15)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="rankrefine",
        description="Layout-grounded draft sampling with hybrid re-ranking and refinement",
    )
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="execute one full pipeline run")
    run.add_argument("--prompt", required=True)
    run.add_argument("--out-dir", type=Path, help="output directory (default runs/<stamp>)")
    _add_config_flags(run)
    _add_backend_flags(run)

    rerank = sub.add_parser("rerank", help="re-rank a stored manifest under a new lambda")
    rerank.add_argument("--manifest", type=Path, required=True)
    rerank.add_argument("--lambda", type=float, dest="lambda_", required=True)

    regularize = sub.add_parser("regularize", help="regularize a layout file to stdout")
    regularize.add_argument("--layout-file", type=Path, required=True)
    regularize.add_argument("--delta", type=float, default=0.02)

    inspect = sub.add_parser("inspect", help="print a manifest's candidate/score table")
    inspect.add_argument("--manifest", type=Path, required=True)

    return parser


def build_config(args: argparse.Namespace) -> PipelineConfig:
    """Merge built-in defaults, the config file, then explicit flags."""
    doc = PipelineConfig().to_dict()
    if args.config is not None:
        try:
            file_doc = json.loads(Path(args.config).read_text(encoding="utf-8"))
        except OSError as exc:
            raise ConfigError(f"cannot read config file {args.config}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {args.config} is not valid JSON: {exc}") from exc
        if not isinstance(file_doc, dict):
            raise ConfigError(f"config file {args.config} must hold a JSON object")
        unknown = set(file_doc) - set(doc)
        if unknown:
            raise ConfigError(f"unknown config file keys: {sorted(unknown)}")
        doc.update(file_doc)
    for key in _CONFIG_FLAGS:
        attr = "lambda_" if key == "lambda" else key
        value = getattr(args, attr, None)
        if value is not None:
            doc[key] = value
    if getattr(args, "no_retain_incumbents", False):
        doc["retain_incumbents"] = False
    config = PipelineConfig.from_dict(doc)
    config.validate()
    return config


def build_backends(args: argparse.Namespace) -> tuple[Backends, dict]:
    if args.backend == "sim":
        sim = make_sim_backends(sigma_place=args.sim_sigma, dropout_rate=args.sim_dropout)
        info = {
            "kind": "sim",
            "sigma_place": args.sim_sigma,
            "dropout_rate": args.sim_dropout,
        }
        return (
            Backends(
                layout=sim.layout,
                generator=sim.generator,
                refiner=sim.refiner,
                embedder=sim.embedder,
            ),
            info,
        )

    urls = {
        "layout": args.layout_url or args.endpoint_url,
        "generate": args.generate_url or args.endpoint_url,
        "refine": args.refine_url or args.endpoint_url,
        "embed": args.embed_url or args.endpoint_url,
    }
    missing = [name for name, url in urls.items() if not url]
    if missing:
        raise ConfigError(
            f"http backend needs --endpoint-url or per-endpoint URLs; missing: {missing}"
        )
    token = os.environ.get(AUTH_TOKEN_ENV)

    def endpoint(url: str) -> BackendEndpoint:
        return BackendEndpoint(
            base_url=url,
            timeout=args.http_timeout,
            retry_budget=args.http_retries,
            auth_token=token,
        )

    backends = Backends(
        layout=HttpLayoutProvider(endpoint(urls["layout"])),
        generator=HttpImageGenerator(endpoint(urls["generate"])),
        refiner=HttpImageRefiner(endpoint(urls["refine"])),
        embedder=HttpEmbeddingProvider(endpoint(urls["embed"])),
    )
    return backends, {"kind": "http", "urls": urls}


def _ranking_rows(manifest: RunManifest, lam: float | None = None) -> list[dict]:
    """Candidate table sorted by combined score (optionally recombined
    under a new lambda), using the standard tie-break."""
    rows = []
    for index, record in enumerate(manifest.candidates):
        if record.score is None:
            continue
        score = record.score
        if lam is None or score.object is None:
            combined, lambda_used = score.combined, score.lambda_used
        else:
            combined, lambda_used = lam * score.scene + (1 - lam) * score.object, lam
        rows.append(
            {
                "id": record.candidate_id,
                "round": record.round,
                "seed": record.seed,
                "parent_id": record.parent_id,
                "scene": score.scene,
                "object": score.object,
                "lambda_used": lambda_used,
                "combined": combined,
                "_index": index,
            }
        )
    rows.sort(key=lambda r: (-r["combined"], r["round"], r["seed"], r["_index"]))
    for row in rows:
        row.pop("_index")
    return rows


def _print_score_table(rows: list[dict]) -> None:
    print(f"{'id':<22} {'round':>5} {'seed':>20} {'scene':>8} {'object':>8} {'combined':>9}")
    for row in rows:
        obj = "-" if row["object"] is None else f"{row['object']:.4f}"
        print(
            f"{row['id']:<22} {row['round']:>5} {row['seed']:>20} "
            f"{row['scene']:>8.4f} {obj:>8} {row['combined']:>9.4f}"
        )


def cmd_run(args: argparse.Namespace) -> int:
    config = build_config(args)
    backends, backend_info = build_backends(args)
    out_dir = args.out_dir
    if out_dir is None:
        out_dir = Path("runs") / time.strftime("%Y%m%d-%H%M%S")
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = run_pipeline(
        args.prompt, config, backends, out_dir=out_dir, backend_info=backend_info
    )
    final = select_final(manifest)
    _print_score_table(_ranking_rows(manifest))
    print(f"final: {out_dir / final.image_path} (combined={final.score.combined:.4f})")
    print(f"manifest: {out_dir / 'manifest.json'}")
    return 0


def cmd_rerank(args: argparse.Namespace) -> int:
    if not (0.0 <= args.lambda_ <= 1.0):
        raise ConfigError(f"lambda must be in [0, 1], got {args.lambda_}")
    manifest = RunManifest.load(args.manifest)
    rows = _ranking_rows(manifest, lam=args.lambda_)
    print(json.dumps({"lambda": args.lambda_, "ranking": rows}, indent=2))
    return 0


def cmd_regularize(args: argparse.Namespace) -> int:
    try:
        text = Path(args.layout_file).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read layout file {args.layout_file}: {exc}") from exc
    layout = parse_layout_response(text, prompt="")
    regularized = regularize_layout(layout, args.delta)
    print(json.dumps(layout_to_wire(regularized)))
    return 0


def cmd_inspect(args: argparse.Namespace) -> int:
    manifest = RunManifest.load(args.manifest)
    doc = {
        "prompt": manifest.prompt,
        "final_candidate_id": manifest.final_candidate_id,
        "candidates": [
            {
                "id": c.candidate_id,
                "round": c.round,
                "seed": c.seed,
                "parent_id": c.parent_id,
                "scene": c.score.scene if c.score else None,
                "object": c.score.object if c.score else None,
                "lambda_used": c.score.lambda_used if c.score else None,
                "combined": c.score.combined if c.score else None,
            }
            for c in manifest.candidates
        ],
    }
    print(json.dumps(doc, indent=2))
    return 0


_COMMANDS = {
    "run": cmd_run,
    "rerank": cmd_rerank,
    "regularize": cmd_regularize,
    "inspect": cmd_inspect,
}


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return _COMMANDS[args.command](args)
    except RankRefineError as exc:
        for category, code in _EXIT_CODES:
            if isinstance(exc, category):
                print(f"error: {category.__name__}: {exc}", file=sys.stderr)
                return code
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
