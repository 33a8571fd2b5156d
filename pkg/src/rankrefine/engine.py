"""End-to-end orchestration: layout, drafts, score, re-rank/refine loop.

The orchestrator owns run state single-threadedly; within a phase,
backend calls fan out over a bounded thread pool and results merge in
seed/index order, so concurrency never changes the manifest. Every
candidate, score, selection, and skipped failure is recorded in a
RunManifest that can be persisted and re-ranked offline.
"""

from __future__ import annotations

import hashlib
import json
import logging
import random
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

from .backends.base import Backends
from .backends.template import TEMPLATE_VERSION
from .errors import (
    AllGenerationFailed,
    BackendError,
    ConfigError,
    EmbedderFailed,
    EmptyRun,
    GenerationFailed,
    LayoutPhaseFailed,
    ManifestError,
    ParseFailed,
    RepairFailed,
)
from .imaging import to_png_bytes
from .layout import (
    DELTA_MAX,
    Layout,
    layout_to_wire,
    parse_layout_response,
    regularize_layout,
)
from .scoring import (
    Candidate,
    Embedding,
    HybridScore,
    hybrid_score,
    object_score,
    rerank_top_k,
    scene_score,
)

logger = logging.getLogger(__name__)

MANIFEST_SCHEMA_VERSION = 1
MANIFEST_FILENAME = "manifest.json"


@dataclass(frozen=True)
class PipelineConfig:
    """Every knob of one run. ``hybrid_lambda`` appears as ``lambda`` in
    config files and manifests."""

    n_drafts: int = 4
    k_keep: int = 1
    m_variants: int = 4
    hybrid_lambda: float = 0.5
    delta: float = 0.02
    rounds: int = 2
    alpha_refine: float = 0.5
    gen_steps: int = 50
    gen_guidance: float = 7.5
    refine_guidance: float = 0.0
    base_seed: int | None = None
    retry_budget: int = 2
    image_size: int = 512
    parallelism: int = 1
    retain_incumbents: bool = True

    def validate(self) -> None:
        problems = []
        if self.n_drafts < 1:
            problems.append("n_drafts must be >= 1")
        if self.k_keep < 1:
            problems.append("k_keep must be >= 1")
        if self.k_keep > self.n_drafts:
            problems.append("k_keep must not exceed n_drafts")
        if self.m_variants < 1:
            problems.append("m_variants must be >= 1")
        if not (0.0 <= self.hybrid_lambda <= 1.0):
            problems.append("lambda must be in [0, 1]")
        if not (0.0 <= self.delta < DELTA_MAX):
            problems.append(f"delta must be in [0, {DELTA_MAX})")
        if self.rounds < 0:
            problems.append("rounds must be >= 0")
        if not (0.0 < self.alpha_refine < 1.0):
            problems.append("alpha_refine must be in (0, 1)")
        if self.gen_steps < 1:
            problems.append("gen_steps must be >= 1")
        if self.base_seed is not None and self.base_seed < 0:
            problems.append("base_seed must be >= 0")
        if self.retry_budget < 0:
            problems.append("retry_budget must be >= 0")
        if self.image_size < 64:
            problems.append("image_size must be >= 64")
        if self.parallelism < 1:
            problems.append("parallelism must be >= 1")
        if problems:
            raise ConfigError("; ".join(problems))

    def to_dict(self) -> dict:
        doc = asdict(self)
        doc["lambda"] = doc.pop("hybrid_lambda")
        return doc

    @classmethod
    def from_dict(cls, doc: dict) -> PipelineConfig:
        data = dict(doc)
        if "lambda" in data:
            data["hybrid_lambda"] = data.pop("lambda")
        known = {f.name for f in cls.__dataclass_fields__.values()}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        try:
            config = cls(**data)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc
        return config


@dataclass
class RoundRecord:
    """Audit trail for one loop iteration (round 0 is the draft phase)."""

    round_index: int
    input_candidate_ids: list[str]
    kept_candidate_ids: list[str]
    produced_candidate_ids: list[str]
    best_score: HybridScore | None

    def to_dict(self) -> dict:
        return {
            "round_index": self.round_index,
            "input_candidate_ids": self.input_candidate_ids,
            "kept_candidate_ids": self.kept_candidate_ids,
            "produced_candidate_ids": self.produced_candidate_ids,
            "best_score": _score_to_dict(self.best_score),
        }


@dataclass
class CandidateRecord:
    """Manifest entry for one successfully generated candidate."""

    candidate_id: str
    seed: int
    round: int
    parent_id: str | None
    image_path: str | None
    score: HybridScore | None

    def to_dict(self) -> dict:
        return {
            "id": self.candidate_id,
            "seed": self.seed,
            "round": self.round,
            "parent_id": self.parent_id,
            "image_path": self.image_path,
            "score": _score_to_dict(self.score),
        }


@dataclass
class RunManifest:
    """Persisted record of one run; replayable and offline re-rankable."""

    prompt: str
    raw_layout_response: str
    layout: dict
    config: PipelineConfig
    backend_info: dict = field(default_factory=dict)
    template_version: str = TEMPLATE_VERSION
    candidates: list[CandidateRecord] = field(default_factory=list)
    rounds: list[RoundRecord] = field(default_factory=list)
    failures: list[dict] = field(default_factory=list)
    final_candidate_id: str | None = None
    timings: dict = field(default_factory=dict)
    schema_version: int = MANIFEST_SCHEMA_VERSION

    def to_dict(self) -> dict:
        return {
            "schema_version": self.schema_version,
            "prompt": self.prompt,
            "template_version": self.template_version,
            "raw_layout_response": self.raw_layout_response,
            "layout": self.layout,
            "config": self.config.to_dict(),
            "backend_info": self.backend_info,
            "candidates": [c.to_dict() for c in self.candidates],
            "rounds": [r.to_dict() for r in self.rounds],
            "failures": self.failures,
            "final_candidate_id": self.final_candidate_id,
            "timings": self.timings,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def save(self, out_dir: Path) -> Path:
        path = out_dir / MANIFEST_FILENAME
        path.write_text(self.to_json(), encoding="utf-8")
        return path

    @classmethod
    def from_dict(cls, doc: dict) -> RunManifest:
        try:
            if doc["schema_version"] != MANIFEST_SCHEMA_VERSION:
                raise ManifestError(
                    f"unsupported manifest schema version {doc['schema_version']}"
                )
            candidates = [
                CandidateRecord(
                    candidate_id=c["id"],
                    seed=c["seed"],
                    round=c["round"],
                    parent_id=c["parent_id"],
                    image_path=c["image_path"],
                    score=_score_from_dict(c["score"]),
                )
                for c in doc["candidates"]
            ]
            rounds = [
                RoundRecord(
                    round_index=r["round_index"],
                    input_candidate_ids=list(r["input_candidate_ids"]),
                    kept_candidate_ids=list(r["kept_candidate_ids"]),
                    produced_candidate_ids=list(r["produced_candidate_ids"]),
                    best_score=_score_from_dict(r["best_score"]),
                )
                for r in doc["rounds"]
            ]
            return cls(
                prompt=doc["prompt"],
                raw_layout_response=doc["raw_layout_response"],
                layout=doc["layout"],
                config=PipelineConfig.from_dict(doc["config"]),
                backend_info=doc.get("backend_info", {}),
                template_version=doc.get("template_version", TEMPLATE_VERSION),
                candidates=candidates,
                rounds=rounds,
                failures=list(doc.get("failures", [])),
                final_candidate_id=doc["final_candidate_id"],
                timings=doc.get("timings", {}),
            )
        except (KeyError, TypeError) as exc:
            raise ManifestError(f"malformed manifest: {exc}") from exc

    @classmethod
    def load(cls, path: Path) -> RunManifest:
        try:
            doc = json.loads(Path(path).read_text(encoding="utf-8"))
        except OSError as exc:
            raise ManifestError(f"cannot read manifest {path}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ManifestError(f"manifest {path} is not valid JSON: {exc}") from exc
        return cls.from_dict(doc)


def _score_to_dict(score: HybridScore | None) -> dict | None:
    if score is None:
        return None
    return {
        "scene": score.scene,
        "object": score.object,
        "lambda_used": score.lambda_used,
        "combined": score.combined,
    }


def _score_from_dict(doc: dict | None) -> HybridScore | None:
    if doc is None:
        return None
    return HybridScore(
        scene=doc["scene"],
        object=doc["object"],
        lambda_used=doc["lambda_used"],
        combined=doc["combined"],
    )


def candidate_id_for(round_index: int, seed: int) -> str:
    return f"r{round_index}_s{seed}"


def derive_refine_seed(base_seed: int, round_index: int, variant: int) -> int:
    """Deterministic 63-bit seed for refine variant ``variant`` of a round."""
    payload = f"refine\x1f{base_seed}\x1f{round_index}\x1f{variant}".encode()
    return int.from_bytes(hashlib.blake2b(payload, digest_size=8).digest(), "big") >> 1


def _map_ordered(
    fn: Callable,
    items: Sequence,
    parallelism: int,
) -> list[tuple[object, Exception | None]]:
    """Apply ``fn`` to each item, in parallel, returning ordered
    (result, error) pairs so merge order never depends on scheduling."""

    def guarded(item):
        try:
            return fn(item), None
        except Exception as exc:  # noqa: BLE001 - failures become data
            return None, exc

    if parallelism <= 1 or len(items) <= 1:
        return [guarded(item) for item in items]
    with ThreadPoolExecutor(max_workers=parallelism) as pool:
        return list(pool.map(guarded, items))


def generate_drafts(
    prompt: str,
    layout: Layout,
    config: PipelineConfig,
    generator,
    failure_log: list[dict] | None = None,
) -> list[Candidate]:
    """Draw the round-0 drafts with seeds base_seed .. base_seed + N - 1.

    The seed schedule gives the prefix property: the first N' drafts of an
    N-draft run are identical to an N'-draft run. Failed seeds are skipped
    and logged; only a fully failed batch aborts.
    """
    if config.base_seed is None:
        raise ConfigError("base_seed must be resolved before generating drafts")
    seeds = [config.base_seed + i for i in range(config.n_drafts)]

    def one(seed: int) -> Candidate:
        image = generator.generate(
            prompt,
            layout,
            seed=seed,
            steps=config.gen_steps,
            guidance=config.gen_guidance,
            width=config.image_size,
            height=config.image_size,
        )
        return Candidate(
            candidate_id=candidate_id_for(0, seed),
            image=image,
            seed=seed,
            round=0,
        )

    results = _map_ordered(one, seeds, config.parallelism)
    drafts: list[Candidate] = []
    for seed, (candidate, error) in zip(seeds, results):
        if error is None:
            drafts.append(candidate)
            continue
        wrapped = error if isinstance(error, GenerationFailed) else GenerationFailed(seed, str(error))
        logger.warning("draft seed %d failed: %s", seed, wrapped)
        if failure_log is not None:
            failure_log.append({"phase": "generate", "seed": seed, "error": str(wrapped)})
    if not drafts:
        raise AllGenerationFailed(f"all {config.n_drafts} draft generations failed")
    return drafts


def refine_round(
    prompt: str,
    kept: list[Candidate],
    config: PipelineConfig,
    round_index: int,
    refiner,
    failure_log: list[dict] | None = None,
) -> list[Candidate]:
    """Produce up to M refinement variants of the kept candidates.

    Variant j refines parent kept[j mod len(kept)] with a fresh seed
    derived from (base_seed, round_index, j). Per-variant failures are
    skipped and logged; an empty result is legal.
    """
    if not kept:
        raise ValueError("refine_round needs a non-empty kept list")
    if config.base_seed is None:
        raise ConfigError("base_seed must be resolved before refining")
    jobs = []
    for j in range(config.m_variants):
        parent = kept[j % len(kept)]
        seed = derive_refine_seed(config.base_seed, round_index, j)
        jobs.append((j, parent, seed))

    def one(job) -> Candidate:
        _j, parent, seed = job
        image = refiner.refine(
            parent.image,
            prompt,
            seed=seed,
            strength=config.alpha_refine,
            guidance=config.refine_guidance,
        )
        return Candidate(
            candidate_id=candidate_id_for(round_index, seed),
            image=image,
            seed=seed,
            round=round_index,
            parent_id=parent.candidate_id,
        )

    results = _map_ordered(one, jobs, config.parallelism)
    produced: list[Candidate] = []
    for (j, parent, seed), (candidate, error) in zip(jobs, results):
        if error is None:
            produced.append(candidate)
            continue
        logger.warning("refine variant %d (round %d) failed: %s", j, round_index, error)
        if failure_log is not None:
            failure_log.append(
                {
                    "phase": "refine",
                    "round": round_index,
                    "variant": j,
                    "parent_id": parent.candidate_id,
                    "seed": seed,
                    "error": str(error),
                }
            )
    return produced


def score_candidates(
    candidates: list[Candidate],
    layout: Layout,
    embedder,
    prompt_embedding: Embedding,
    description_embeddings: list[Embedding],
    lam: float,
    parallelism: int,
    failure_log: list[dict] | None = None,
) -> list[Candidate]:
    """Attach hybrid scores; returns the candidates that scored cleanly."""

    def one(candidate: Candidate) -> HybridScore:
        image_emb = embedder.embed_image(candidate.image)
        scene = scene_score(image_emb, prompt_embedding)
        obj = object_score(candidate.image, layout, embedder, description_embeddings)
        return hybrid_score(scene, obj, lam)

    results = _map_ordered(one, candidates, parallelism)
    scored = []
    for candidate, (score, error) in zip(candidates, results):
        if error is None:
            candidate.score = score
            scored.append(candidate)
            continue
        logger.warning("scoring %s failed: %s", candidate.candidate_id, error)
        if failure_log is not None:
            failure_log.append(
                {"phase": "score", "candidate_id": candidate.candidate_id, "error": str(error)}
            )
    return scored


def _best(candidates: list[Candidate]) -> Candidate | None:
    scored = [c for c in candidates if c.score is not None]
    if not scored:
        return None
    return rerank_top_k(scored, 1)[0]


def resolve_base_seed(config: PipelineConfig) -> PipelineConfig:
    """Fill in a recorded entropy seed when none was given, so every run
    is replayable from its manifest."""
    if config.base_seed is not None:
        return config
    seed = random.SystemRandom().randrange(2**31)
    logger.info("sampled base_seed=%d from system entropy", seed)
    return replace(config, base_seed=seed)


def run_pipeline(
    prompt: str,
    config: PipelineConfig,
    backends: Backends,
    out_dir: Path | None = None,
    backend_info: dict | None = None,
) -> RunManifest:
    """Execute layout -> drafts -> (re-rank, refine)* -> final selection.

    The next-round pool is kept + produced while ``retain_incumbents`` is
    set (the default), which makes the best pool score non-decreasing by
    construction. The final pick is the argmax of combined score over
    every candidate ever scored. Images and the manifest are persisted
    under ``out_dir`` when given.
    """
    if not prompt or not prompt.strip():
        raise ConfigError("prompt must be non-empty")
    config.validate()
    config = resolve_base_seed(config)
    failures: list[dict] = []
    timings: dict = {}
    t_start = time.perf_counter()

    # --- layout ----------------------------------------------------------
    t0 = time.perf_counter()
    raw_response = ""
    layout: Layout | None = None
    last_error: Exception | None = None
    for attempt in range(1 + config.retry_budget):
        try:
            raw_response = backends.layout.propose(prompt)
            layout = regularize_layout(
                parse_layout_response(raw_response, prompt), config.delta
            )
            break
        except (ParseFailed, RepairFailed) as exc:
            last_error = exc
            failures.append({"phase": "layout", "attempt": attempt, "error": str(exc)})
            logger.warning("layout attempt %d failed: %s", attempt, exc)
        except BackendError as exc:
            raise LayoutPhaseFailed(f"layout provider unreachable: {exc}") from exc
    if layout is None:
        raise LayoutPhaseFailed(
            f"no usable layout after {1 + config.retry_budget} attempt(s): {last_error}"
        )
    timings["layout_s"] = time.perf_counter() - t0

    # --- text embeddings, computed once per run -------------------------
    try:
        prompt_embedding = backends.embedder.embed_text(prompt)
        description_embeddings = [
            backends.embedder.embed_text(spec.description) for spec in layout.objects
        ]
    except EmbedderFailed as exc:
        raise EmbedderFailed(f"cannot embed run texts: {exc}") from exc

    # --- drafts ----------------------------------------------------------
    t0 = time.perf_counter()
    drafts = generate_drafts(prompt, layout, config, backends.generator, failures)
    all_candidates: list[Candidate] = list(drafts)
    pool = score_candidates(
        drafts,
        layout,
        backends.embedder,
        prompt_embedding,
        description_embeddings,
        config.hybrid_lambda,
        config.parallelism,
        failures,
    )
    if not pool:
        raise AllGenerationFailed("no draft survived scoring")
    timings["drafts_s"] = time.perf_counter() - t0

    best_draft = _best(pool)
    rounds = [
        RoundRecord(
            round_index=0,
            input_candidate_ids=[],
            kept_candidate_ids=[],
            produced_candidate_ids=[c.candidate_id for c in drafts],
            best_score=best_draft.score if best_draft else None,
        )
    ]

    # --- iterative re-rank + refine --------------------------------------
    round_timings: list[float] = []
    for round_index in range(1, config.rounds + 1):
        t0 = time.perf_counter()
        input_ids = [c.candidate_id for c in pool]
        kept = rerank_top_k(pool, config.k_keep)
        produced = refine_round(
            prompt, kept, config, round_index, backends.refiner, failures
        )
        all_candidates.extend(produced)
        produced_scored = score_candidates(
            produced,
            layout,
            backends.embedder,
            prompt_embedding,
            description_embeddings,
            config.hybrid_lambda,
            config.parallelism,
            failures,
        )
        if config.retain_incumbents:
            pool = kept + produced_scored
        else:
            # ablation mode: move on with the fresh variants when there are any
            pool = produced_scored or kept
        round_best = _best(kept + produced_scored)
        rounds.append(
            RoundRecord(
                round_index=round_index,
                input_candidate_ids=input_ids,
                kept_candidate_ids=[c.candidate_id for c in kept],
                produced_candidate_ids=[c.candidate_id for c in produced],
                best_score=round_best.score if round_best else None,
            )
        )
        round_timings.append(time.perf_counter() - t0)
    timings["rounds_s"] = round_timings

    # --- final selection --------------------------------------------------
    overall_best = _best(all_candidates)
    if overall_best is None:
        raise EmptyRun("run produced no scored candidates")
    timings["total_s"] = time.perf_counter() - t_start

    records = [
        CandidateRecord(
            candidate_id=c.candidate_id,
            seed=c.seed,
            round=c.round,
            parent_id=c.parent_id,
            image_path=f"images/{c.candidate_id}.png" if out_dir is not None else None,
            score=c.score,
        )
        for c in all_candidates
    ]
    manifest = RunManifest(
        prompt=prompt,
        raw_layout_response=raw_response,
        layout=layout_to_wire(layout),
        config=config,
        backend_info=backend_info or {},
        candidates=records,
        rounds=rounds,
        failures=failures,
        final_candidate_id=overall_best.candidate_id,
        timings=timings,
    )

    if out_dir is not None:
        out_dir = Path(out_dir)
        images_dir = out_dir / "images"
        images_dir.mkdir(parents=True, exist_ok=True)
        for candidate in all_candidates:
            (images_dir / f"{candidate.candidate_id}.png").write_bytes(
                to_png_bytes(candidate.image)
            )
        manifest.save(out_dir)
    return manifest


def select_final(manifest: RunManifest) -> CandidateRecord:
    """Argmax of combined score over the manifest's scored candidates,
    with the re-ranking tie-break; matches ``final_candidate_id``."""
    scored = [(i, c) for i, c in enumerate(manifest.candidates) if c.score is not None]
    if not scored:
        raise EmptyRun("manifest has no scored candidates")
    best_i, best = scored[0]
    for i, record in scored[1:]:
        key = (-record.score.combined, record.round, record.seed, i)
        best_key = (-best.score.combined, best.round, best.seed, best_i)
        if key < best_key:
            best_i, best = i, record
    return best
