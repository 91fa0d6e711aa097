"""Test-time search over sampled trajectories.

Candidates are scored in a fixed embedding space (a seeded random feature
map standing in for a pretrained audio encoder) by consistency with earlier
notes, adherence to the condition's target, a weighted mix of the two, a
TCC-based loss, or the trajectory's own log-confidence.

RNG layout: a search call receives a :class:`~dfm.rng.Stream`; candidate i
draws from ``stream.child(i)``, and for an instrument note j of candidate i
the stream is ``stream.child(j, i)``. Inside one trajectory the main
generator supplies x0 and one eps per step; extra branches at guided step k
come from ``<candidate stream>.child(k)``.
"""

from __future__ import annotations

import functools
import math
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .datagen import DatasetSpec
from .errors import InputDomainError, TrajectoryDivergence, UndefinedScoreError
from .metrics import timbre_consistency_loss
from .net import ConditionSet, NetParams
from .rng import Stream
from .sampler import (
    SamplerConfig,
    Trajectory,
    draw_x0,
    gaussian_log_density,
    generate_trajectory,
    mean_completion_rows,
    solver_step,
    temperature,
)

OBJECTIVES = ("prompt_only", "consistency_only", "combined", "combined_loss", "confidence")
EMBED_DIM = 32


@dataclass(frozen=True)
class EarlyStop:
    window: int = 4
    min_delta: float = 1e-4

    def __post_init__(self):
        if self.window < 1:
            raise InputDomainError("early-stop window must be >= 1")


@dataclass
class SearchConfig:
    n: int = 16
    lam: float = 0.7
    objective: str = "combined"
    guided_steps: int = 0
    branch: int = 4
    early_stop: EarlyStop | None = None
    tau: float | None = None  # overrides the candidate-count schedule
    tau0: float = 0.01
    tau_max: float = 0.08
    embed_seed: int = 0
    embed_dim: int = EMBED_DIM

    def __post_init__(self):
        if self.n < 1:
            raise InputDomainError("N must be >= 1")
        if not 0.0 <= self.lam <= 1.0:
            raise InputDomainError("lambda must lie in [0, 1]")
        if self.objective not in OBJECTIVES:
            raise InputDomainError(f"objective must be one of {OBJECTIVES}")
        if self.guided_steps < 0 or self.branch < 1:
            raise InputDomainError("guided_steps must be >= 0 and branch >= 1")
        if isinstance(self.early_stop, dict):
            self.early_stop = EarlyStop(**self.early_stop)

    def resolved_tau(self) -> float:
        if self.tau is not None:
            return float(self.tau)
        return temperature(self.n, self.tau0, self.tau_max)


@dataclass
class SearchCandidate:
    index: int
    trajectory: Trajectory
    sample: np.ndarray
    embedding: np.ndarray
    scores: dict[str, float] = field(default_factory=dict)


@dataclass
class SearchResult:
    winner: SearchCandidate
    candidates: list[SearchCandidate]
    log: list[dict]
    tau: float


# ---------------------------------------------------------------------------
# embeddings


@functools.lru_cache(maxsize=32)
def _embedding_map(seed: int, d: int, dim: int) -> tuple[np.ndarray, np.ndarray]:
    rng = Stream(seed).generator()
    w = rng.standard_normal((d, dim))
    b = rng.uniform(-1.0, 1.0, size=dim)
    w.setflags(write=False)
    b.setflags(write=False)
    return w, b


def embed_samples(x, embed_seed: int = 0, dim: int = EMBED_DIM) -> np.ndarray:
    """Row-wise ``normalize(tanh(x W + b))`` with (W, b) fixed by ``embed_seed``."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    if not np.all(np.isfinite(x)):
        raise InputDomainError("cannot embed non-finite samples")
    w, b = _embedding_map(embed_seed, x.shape[1], dim)
    z = np.tanh(x @ w + b)
    return z / np.linalg.norm(z, axis=1, keepdims=True)


def embed_sample(x, embed_seed: int = 0, dim: int = EMBED_DIM) -> np.ndarray:
    return embed_samples(np.asarray(x, dtype=np.float64)[None, :], embed_seed, dim)[0]


def embed_condition_text(cond, spec: DatasetSpec, embed_seed: int = 0, dim: int = EMBED_DIM) -> np.ndarray:
    """Target embedding for a condition: the embedding of its class centroid."""
    cond = spec.check_cond(cond)
    return embed_sample(np.asarray(spec.centroids[cond.class_id]), embed_seed, dim)


# ---------------------------------------------------------------------------
# scores


def _cos(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return float(a @ b) / (math.sqrt(float(a @ a)) * math.sqrt(float(b @ b)))


def consistency_score(candidate_emb, prior_embs: Sequence) -> float:
    """Mean cosine similarity between the candidate and each prior note."""
    if len(prior_embs) == 0:
        raise UndefinedScoreError("consistency is undefined without prior notes")
    return math.fsum(_cos(candidate_emb, p) for p in prior_embs) / len(prior_embs)


def prompt_score(candidate_emb, text_emb) -> float:
    return _cos(candidate_emb, text_emb)


def total_score(s_consistency: float, s_prompt: float, lam: float) -> float:
    if not 0.0 <= lam <= 1.0:
        raise InputDomainError("lambda must lie in [0, 1]")
    return lam * s_consistency + (1.0 - lam) * s_prompt


def combined_loss(tcc_value: float, clap_value: float, lam: float) -> float:
    """``lam * TCC + (1 - lam) * (1 - prompt)``; lower is better."""
    if not 0.0 <= lam <= 1.0:
        raise InputDomainError("lambda must lie in [0, 1]")
    if tcc_value < 0:
        raise InputDomainError("TCC must be >= 0")
    return lam * tcc_value + (1.0 - lam) * (1.0 - clap_value)


def score_sample(
    sample: np.ndarray,
    embedding: np.ndarray,
    confidence: float,
    prior_embs: Sequence,
    prior_samples: Sequence | None,
    text_emb,
    lam: float,
) -> dict[str, float]:
    """Every score that is defined for this candidate."""
    scores = {"confidence": float(confidence)}
    if text_emb is not None:
        scores["prompt"] = prompt_score(embedding, text_emb)
    if len(prior_embs):
        scores["consistency"] = consistency_score(embedding, prior_embs)
        if "prompt" in scores:
            scores["combined"] = total_score(scores["consistency"], scores["prompt"], lam)
    if prior_samples is not None and len(prior_samples) and "prompt" in scores:
        tcc = timbre_consistency_loss(list(prior_samples) + [sample])
        scores["tcc"] = tcc
        scores["combined_loss"] = combined_loss(tcc, scores["prompt"], lam)
    return scores


_OBJECTIVE_KEY = {
    "prompt_only": "prompt",
    "consistency_only": "consistency",
    "combined": "combined",
    "combined_loss": "combined_loss",
    "confidence": "confidence",
}


def objective_value(scores: dict[str, float], objective: str) -> float:
    """Selection key (higher is better) for ``objective``."""
    key = _OBJECTIVE_KEY[objective]
    if key not in scores:
        raise UndefinedScoreError(f"objective {objective!r} is undefined here (missing {key!r} score)")
    return -scores[key] if objective == "combined_loss" else scores[key]


def check_objective_inputs(objective: str, prior_embs, prior_samples, text_emb) -> None:
    if objective in ("consistency_only", "combined") and len(prior_embs) == 0:
        raise UndefinedScoreError(f"objective {objective!r} needs at least one prior note")
    if objective == "combined_loss" and not (prior_samples is not None and len(prior_samples)):
        raise UndefinedScoreError("combined_loss needs at least one prior note sample")
    if objective in ("prompt_only", "combined", "combined_loss") and text_emb is None:
        raise UndefinedScoreError(f"objective {objective!r} needs a target embedding")


def select(values: Sequence[float]) -> int:
    """Index of the maximum; ties go to the lowest index."""
    best = 0
    for i in range(1, len(values)):
        if values[i] > values[best]:
            best = i
    return best


def rank_pool(
    pool: Sequence[tuple],
    prior_embs: Sequence,
    text_emb,
    objective: str,
    lam: float,
    prior_samples: Sequence | None = None,
) -> tuple[int, list[float], list[dict]]:
    """Score an already generated pool of ``(sample, embedding, confidence)``.

    Returns ``(winner index, objective values, per-candidate scores)``.
    """
    if len(pool) == 0:
        raise InputDomainError("empty candidate pool")
    check_objective_inputs(objective, prior_embs, prior_samples, text_emb)
    scores = [score_sample(s, e, c, prior_embs, prior_samples, text_emb, lam) for s, e, c in pool]
    values = [objective_value(sc, objective) for sc in scores]
    return select(values), values, scores


# ---------------------------------------------------------------------------
# search


def guided_integrate(
    params: NetParams,
    cond,
    prior_embs: Sequence,
    text_emb,
    search_cfg: SearchConfig,
    sampler_cfg: SamplerConfig,
    stream: Stream,
    prior_samples: Sequence | None = None,
) -> Trajectory:
    """Integrate one trajectory, greedily choosing among ``branch`` one-step
    candidates at each of the last ``guided_steps`` steps.

    A branch is judged by completing it to t=1 with mean (tau=0) integration
    and scoring that preview. Branch 0 always uses the main stream's eps, so
    with ``guided_steps == 0`` or ``branch == 1`` the result equals plain
    integration from the same stream.
    """
    n = sampler_cfg.num_steps
    if search_cfg.guided_steps > n:
        raise InputDomainError("guided_steps cannot exceed num_steps")
    if search_cfg.guided_steps and search_cfg.branch > 1:
        check_objective_inputs(search_cfg.objective, prior_embs, prior_samples, text_emb)
    d = params.config.d
    tau = float(sampler_cfg.tau)
    h = 1.0 / n
    main = stream.generator()
    x = draw_x0(d, main)
    traj = Trajectory(times=[0.0], states=[x.copy()], tau=tau)
    zero = np.zeros(d)
    first_guided = n - search_cfg.guided_steps
    for k in range(n):
        t = k / n
        eps_main = main.standard_normal(d) if tau != 0.0 else zero
        eps_list = [eps_main]
        if k >= first_guided and search_cfg.branch > 1:
            side = stream.child(k).generator()
            eps_list += [side.standard_normal(d) for _ in range(search_cfg.branch - 1)]
        steps = [solver_step(params, x, t, h, cond, tau, e, sampler_cfg.solver) for e in eps_list]
        if len(steps) == 1:
            chosen = 0
        else:
            nexts = np.stack([s[0] for s in steps])
            previews = nexts if k + 1 == n else mean_completion_rows(params, nexts, k + 1, cond, sampler_cfg)
            embs = embed_samples(previews, search_cfg.embed_seed, search_cfg.embed_dim)
            values = []
            for (_, v, mu, lv), preview, emb in zip(steps, previews, embs):
                conf = traj.cum_log_confidence + gaussian_log_density(v, mu, lv)
                scores = score_sample(preview, emb, conf, prior_embs, prior_samples, text_emb, search_cfg.lam)
                values.append(objective_value(scores, search_cfg.objective))
            chosen = select(values)
        x, v, mu, lv = steps[chosen]
        if not np.all(np.isfinite(x)):
            raise TrajectoryDivergence(k)
        traj.times.append((k + 1) / n)
        traj.states.append(x.copy())
        traj.sampled_velocities.append(v)
        traj.noise_draws.append(np.array(eps_list[chosen], copy=True))
        traj.cum_log_confidence += gaussian_log_density(v, mu, lv)
    return traj


def best_of_n(
    params: NetParams,
    cond,
    prior_embs: Sequence,
    text_emb,
    search_cfg: SearchConfig,
    sampler_cfg: SamplerConfig,
    stream: Stream,
    prior_samples: Sequence | None = None,
    note_index: int = 0,
) -> SearchResult:
    """Generate up to N candidates and keep the best under the objective."""
    check_objective_inputs(search_cfg.objective, prior_embs, prior_samples, text_emb)
    tau = search_cfg.resolved_tau()
    cfg = replace(sampler_cfg, tau=tau)
    es = search_cfg.early_stop
    candidates: list[SearchCandidate] = []
    values: list[float] = []
    running_best: list[float] = []
    log: list[dict] = []
    for i in range(search_cfg.n):
        traj = guided_integrate(params, cond, prior_embs, text_emb, search_cfg, cfg, stream.child(i), prior_samples)
        sample = traj.final
        emb = embed_samples(sample, search_cfg.embed_seed, search_cfg.embed_dim)[0]
        scores = score_sample(sample, emb, traj.cum_log_confidence, prior_embs, prior_samples, text_emb, search_cfg.lam)
        value = objective_value(scores, search_cfg.objective)
        candidates.append(SearchCandidate(i, traj, sample, emb, scores))
        values.append(value)
        running_best.append(value if not running_best else max(running_best[-1], value))
        stop = es is not None and i >= es.window and running_best[i] - running_best[i - es.window] < es.min_delta
        log.append(
            {
                "note": note_index,
                "candidate": i,
                "scores": scores,
                "objective": search_cfg.objective,
                "value": value,
                "tau": tau,
                "early_stop": bool(stop),
            }
        )
        if stop:
            break
    win = select(values)
    for rec in log:
        rec["selected"] = rec["candidate"] == win
    return SearchResult(candidates[win], candidates, log, tau)


@dataclass
class InstrumentResult:
    samples: list[np.ndarray]
    conds: list[ConditionSet]
    notes: list[dict]
    log: list[dict]


def generate_instrument(
    params: NetParams,
    conds: Sequence,
    search_cfg: SearchConfig,
    sampler_cfg: SamplerConfig,
    stream: Stream,
    text_emb=None,
) -> InstrumentResult:
    """Generate notes in the given order; every note after the first is
    chosen by :func:`best_of_n` against the notes accepted so far. The first
    note is a single deterministic (tau=0) trajectory. Output is sorted by
    pitch id."""
    if len(conds) == 0:
        raise InputDomainError("need at least one note")
    conds = [ConditionSet(*map(int, c)) for c in conds]
    if len({c.class_id for c in conds}) != 1:
        raise InputDomainError("all notes of an instrument share one class id")
    accepted: list[np.ndarray] = []
    accepted_embs: list[np.ndarray] = []
    notes: list[dict] = []
    log: list[dict] = []
    for j, cond in enumerate(conds):
        note_stream = stream.child(j)
        if j == 0:
            first_cfg = replace(sampler_cfg, tau=0.0)
            sample = generate_trajectory(params, cond, first_cfg, note_stream.child(0).generator()).final
            emb = embed_samples(sample, search_cfg.embed_seed, search_cfg.embed_dim)[0]
            notes.append({"note": 0, "cond": list(cond), "candidates": 1, "winner": 0, "tau": 0.0})
        else:
            res = best_of_n(
                params, cond, accepted_embs, text_emb, search_cfg, sampler_cfg, note_stream,
                prior_samples=accepted, note_index=j,
            )
            sample, emb = res.winner.sample, res.winner.embedding
            log.extend(res.log)
            notes.append(
                {
                    "note": j,
                    "cond": list(cond),
                    "candidates": len(res.candidates),
                    "winner": res.winner.index,
                    "tau": res.tau,
                    "scores": res.winner.scores,
                }
            )
        accepted.append(sample)
        accepted_embs.append(emb)
    order = sorted(range(len(conds)), key=lambda i: conds[i].pitch_id)
    return InstrumentResult([accepted[i] for i in order], [conds[i] for i in order], notes, log)
