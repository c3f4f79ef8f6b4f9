"""
Hypothesis decoding for trained generators: latent sampling, greedy decoding and k-beam search.
"""
import logging
from typing import List, Optional, Sequence, Tuple

import attrs
import numpy as np

from .data import NULL_ID, OOV_ID, Example, pad
from .exceptions import ConfigError
from .models import GeneratorModel
from .numerics import Tensor
from .utils import derive_rng, parallel_map

logger = logging.getLogger(__name__)

PROGRESS_EVERY = 1000


def _non_negative(instance, attribute, value):
    if value is not None and np.any(np.asarray(value) < 0):
        raise ConfigError(f"{attribute.name} must be non-negative")


def _positive(instance, attribute, value):
    if value < 1:
        raise ConfigError(f"{attribute.name} must be at least 1, got {value}")


@attrs.define
class GenerationConfig:
    beam_k: int = attrs.field(default=1, validator=_positive)
    max_len: int = attrs.field(default=15, validator=_positive)
    latent_sigma: Optional[Tensor] = attrs.field(default=None, validator=_non_negative)
    seed: int = 7
    # One sigma shared by all dimensions (the mean of the per-dimension values).
    scalar_sigma: bool = False
    block_oov: bool = True


@attrs.define(frozen=True)
class BeamEntry:
    tokens: Tuple[int, ...]
    log_prob: float
    finished: bool = False


@attrs.define
class BeamResult:
    best: List[int]
    finalists: List[BeamEntry]


def sample_latent(cfg: GenerationConfig, rng: np.random.Generator) -> Tensor:
    """
    Draw Z with ``Z_j ~ N(0, sigma_j)``.

    Raises:
        ConfigError: if the latent spread has not been computed
    """
    if cfg.latent_sigma is None:
        raise ConfigError("latent_sigma is not set; compute it from the trained generator first")
    sigma = np.asarray(cfg.latent_sigma, dtype=np.float64)
    if cfg.scalar_sigma:
        sigma = np.full_like(sigma, float(np.mean(sigma)))
    return rng.normal(0.0, 1.0, size=sigma.shape) * sigma


def _step_log_probs(model: GeneratorModel, context, state, tokens, cfg: GenerationConfig):
    log_probs, state = model.decoder_step(context, state, np.asarray(tokens, dtype=np.int64))
    if cfg.block_oov and log_probs.shape[1] > OOV_ID:
        log_probs[:, OOV_ID] = -np.inf
    return log_probs, state


def greedy_decode(model: GeneratorModel, premise: Sequence[int], label: int, Z: Tensor,
                  cfg: GenerationConfig) -> Tuple[List[int], float]:
    """Greedy decode returning the tokens and their joint log-probability."""
    context, state = model.decoder_start(premise, label, Z)
    tokens: List[int] = []
    total = 0.0
    last = NULL_ID
    while len(tokens) < cfg.max_len:
        log_probs, state = _step_log_probs(model, context, state, [last], cfg)
        # np.argmax returns the lowest index on ties
        word = int(np.argmax(log_probs[0]))
        total += float(log_probs[0, word])
        if word == NULL_ID:
            break
        tokens.append(word)
        last = word
    return tokens, total


def greedy_generate(model: GeneratorModel, premise: Sequence[int], label: int, Z: Tensor,
                    cfg: GenerationConfig) -> List[int]:
    """
    Feed back the argmax word each step, starting from <null>, until <null> is emitted or
    ``cfg.max_len`` tokens exist. The start and terminal <null> are not returned.
    """
    return greedy_decode(model, premise, label, Z, cfg)[0]


def beam_generate(model: GeneratorModel, premise: Sequence[int], label: int, Z: Tensor,
                  cfg: GenerationConfig) -> BeamResult:
    """
    k-beam search over joint log-probability.

    Each round expands every unfinished entry by the whole vocabulary and keeps the k best of
    the expansions and the already finished entries. An entry finishes when it emits <null> or
    reaches ``cfg.max_len`` tokens; the search stops when all kept entries are finished.
    Ties are broken by candidate order: finished entries first, then expansions by
    (entry, word id).
    """
    k = cfg.beam_k
    context, start_state = model.decoder_start(premise, label, Z)
    beams = [BeamEntry(tokens=(), log_prob=0.0)]
    states = start_state
    state_rows = np.array([0])

    while not all(entry.finished for entry in beams):
        active = [i for i, entry in enumerate(beams) if not entry.finished]
        last = [beams[i].tokens[-1] if beams[i].tokens else NULL_ID for i in active]
        log_probs, new_states = _step_log_probs(model, context, states.select(state_rows[active]), last, cfg)

        candidates: List[Tuple[BeamEntry, int]] = [(entry, -1) for entry in beams if entry.finished]
        for row, i in enumerate(active):
            entry = beams[i]
            for word in range(log_probs.shape[1]):
                score = entry.log_prob + float(log_probs[row, word])
                if not np.isfinite(score):
                    continue
                if word == NULL_ID:
                    candidates.append((BeamEntry(entry.tokens, score, True), -1))
                else:
                    tokens = entry.tokens + (word,)
                    candidates.append((BeamEntry(tokens, score, len(tokens) >= cfg.max_len), row))

        order = sorted(range(len(candidates)), key=lambda c: -candidates[c][0].log_prob)[:k]
        beams = [candidates[c][0] for c in order]
        state_rows = np.array([max(candidates[c][1], 0) for c in order])
        states = new_states

    finalists = sorted(beams, key=lambda entry: -entry.log_prob)
    return BeamResult(best=list(finalists[0].tokens), finalists=finalists)


def decode(model: GeneratorModel, premise: Sequence[int], label: int, Z: Tensor,
           cfg: GenerationConfig) -> Tuple[List[int], float]:
    if cfg.beam_k == 1:
        return greedy_decode(model, premise, label, Z, cfg)
    result = beam_generate(model, premise, label, Z, cfg)
    return result.best, result.finalists[0].log_prob


def generate_for_example(model: GeneratorModel, example: Example, cfg: GenerationConfig,
                         rng: np.random.Generator, origin_index: Optional[int] = None) -> Example:
    """
    Replace the hypothesis of ``example`` with a generated one, keeping premise and label.

    Z is sampled from N(0, sigma) with the spread recorded on ``cfg`` (ones for vae-encdec).
    """
    Z = sample_latent(cfg, rng)
    max_len = min(cfg.max_len, model.hypothesis_len)
    tokens, log_prob = decode(model, example.premise, example.label, Z, attrs.evolve(cfg, max_len=max_len))
    return Example(
        premise=example.premise,
        hypothesis=pad(tokens, model.hypothesis_len),
        label=example.label,
        origin_index=origin_index,
        gen_logprob=log_prob,
    )


def generation_config_for(model: GeneratorModel, beam_k: int = 1, max_len: Optional[int] = None,
                          seed: int = 7, scalar_sigma: bool = False) -> GenerationConfig:
    if model.latent_sigma is None:
        raise ConfigError(f"{model.kind} generator has no latent spread recorded")
    return GenerationConfig(
        beam_k=beam_k,
        max_len=max_len or model.hypothesis_len,
        latent_sigma=np.asarray(model.latent_sigma),
        seed=seed,
        scalar_sigma=scalar_sigma,
    )


def generate_examples(model: GeneratorModel, examples: Sequence[Example], cfg: GenerationConfig,
                      workers: int = 1, passes: int = 1) -> List[Example]:
    """
    Generate ``passes`` hypotheses per source example, in source order per pass.

    Emission ``j`` of the run draws its latent from ``derive_rng(cfg.seed, 'generate', j)``, so
    results do not depend on ``workers``.
    """
    jobs = [(p * len(examples) + i, i) for p in range(passes) for i in range(len(examples))]

    def run(job):
        emission, source = job
        if emission and emission % PROGRESS_EVERY == 0:
            logger.info(f"Generated {emission}/{len(jobs)} hypotheses")
        return generate_for_example(model, examples[source], cfg,
                                    derive_rng(cfg.seed, 'generate', emission), origin_index=source)

    return parallel_map(run, jobs, workers)
