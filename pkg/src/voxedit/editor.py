"""Prompt-driven editing of speaker embeddings.

A prompt is reduced to an ordered list of vocabulary descriptors, then the
source embedding is edited once per descriptor, each output feeding the
next edit. A single edit interpolates between the recalled descriptor and the
recalled main speaker embedding and adds back the residual recall::

    s_edit = alpha * t_hat + (1 - alpha) * s_main + s_res
"""

from __future__ import annotations

import json
import logging
import os
import re
from dataclasses import dataclass
from importlib import resources
from typing import Sequence

import numpy as np
import requests

from . import memnet
from .dataset import DescriptorVocab
from .errors import DataError, ExtractionError, UsageError
from .trainer import MODES, Checkpoint

logger = logging.getLogger(__name__)

DEFAULT_ALPHA = 0.7
FUZZY_THRESHOLD = 0.4
TOKEN_ENV = "VOXEDIT_LLM_TOKEN"

# Non-attribute words that are close in spelling to descriptors ("sound"/"round").
STOPWORDS = frozenset("""
a an the to be is it its this that these and or but at of in on for with as so than then
i i'd id d me my we you your he she they want wants wanted would like hope make makes made
become becomes became get gets more most less bit little lot much slightly somewhat very
sound sounds voice voices speech tone timbre speaker speakers pitch quality same time while
add touch achieve please could can turn give let change edit feel feels into one some
""".split())

# Diminishing edits are unsupported; a descriptor right after these is skipped.
NEGATORS = frozenset({"less", "not", "no"})

# Common words mapped onto descriptors with the same perceptual meaning.
SYNONYMS = {
    "deep": "Low",
    "bass": "Low",
    "raspy": "Hoarse",
    "gravelly": "Coarse",
    "rough": "Coarse",
    "mellow": "Soft",
    "gentle": "Soft",
    "muted": "Muffled",
    "shrieky": "Shrill",
}

_SUFFIXES = (("iness", "y"), ("ness", ""), ("iest", "y"), ("ier", "y"), ("est", ""), ("er", ""), ("ly", ""), ("ish", ""))
_WORD = re.compile(r"[A-Za-z]+(?:'[A-Za-z]+)?")
_NUMBERED = re.compile(r"(?<![\w.])\d+\s*\.\s*([A-Za-z][A-Za-z\-]*)")


def _resource(name: str) -> str:
    return resources.files("voxedit").joinpath("resources", name).read_text(encoding="utf-8").strip()


def prompt_templates() -> list[str]:
    """Sentence patterns with a ``[Descriptor]`` placeholder."""
    return _resource("prompt_templates.txt").splitlines()


@dataclass
class ExtractionResult:
    descriptors: list[str]
    provenance: list[str]  # "exact" | "lexical-nearest" | "llm", one per descriptor
    prompt: str


@dataclass
class EditRequest:
    source: np.ndarray
    descriptors: list[str]
    alpha: float = DEFAULT_ALPHA
    mode: str = "full"

    def __post_init__(self):
        if not self.descriptors:
            raise DataError("edit request needs at least one descriptor")
        if not 0.0 <= self.alpha <= 1.0:
            raise DataError(f"alpha must lie in [0, 1], got {self.alpha}")
        if self.mode not in MODES:
            raise DataError(f"unknown mode {self.mode!r}")


# -- lexical extraction ------------------------------------------------------

def edit_distance(a: str, b: str) -> int:
    prev = list(range(len(b) + 1))
    for i, ca in enumerate(a, 1):
        cur = [i]
        for j, cb in enumerate(b, 1):
            cur.append(min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (ca != cb)))
        prev = cur
    return prev[-1]


def normalized_edit_distance(a: str, b: str) -> float:
    return edit_distance(a, b) / max(len(a), len(b), 1)


def _word_forms(word: str) -> list[str]:
    """``word`` plus plausible stems after stripping comparative/derivational suffixes."""
    forms = [word]
    for suf, rep in _SUFFIXES:
        if word.endswith(suf) and len(word) - len(suf) >= 3:
            stem = word[: -len(suf)] + rep
            forms += [stem, stem + "e"]
            if len(stem) > 3 and stem[-1] == stem[-2]:
                forms.append(stem[:-1])  # thinner -> thin
    return forms


def _morph_match(word: str, vocab: DescriptorVocab) -> str | None:
    for form in _word_forms(word)[1:] + [word]:
        if form in vocab:
            return vocab.canonical(form)
        target = SYNONYMS.get(form)
        if target is not None and target in vocab:
            return vocab.canonical(target)
    return None


def extract_lexical(prompt: str, vocab: DescriptorVocab) -> ExtractionResult:
    """Scan ``prompt`` left to right for descriptors.

    Whole words matching a descriptor (any case) are exact hits; inflected
    forms and listed synonyms ("lower", "deeper", "coarseness") are
    lexical-nearest hits. Only when neither finds anything is each remaining
    word matched to the closest descriptor by normalized edit distance,
    accepted below 0.4.
    """
    if not prompt or not prompt.strip():
        raise ExtractionError("empty prompt")
    words = [w.lower() for w in _WORD.findall(prompt)]
    found, prov = [], []
    for i, w in enumerate(words):
        if w in STOPWORDS:
            continue
        if i and words[i - 1] in NEGATORS:
            logger.warning("skipping diminishing request %r %r", words[i - 1], w)
            continue
        if w in vocab:
            hit, how = vocab.canonical(w), "exact"
        else:
            hit, how = _morph_match(w, vocab), "lexical-nearest"
        if hit is not None and hit not in found:
            found.append(hit)
            prov.append(how)
    if not found:
        for i, w in enumerate(words):
            if w in STOPWORDS or len(w) < 4 or (i and words[i - 1] in NEGATORS):
                continue
            dist, best = min((normalized_edit_distance(w, d.lower()), d) for d in vocab.descriptors)
            if dist < FUZZY_THRESHOLD and best not in found:
                found.append(best)
                prov.append("lexical-nearest")
    if not found:
        raise ExtractionError(f"no attribute found in prompt {prompt!r}")
    return ExtractionResult(found, prov, prompt)


# -- LLM extraction ------------------------------------------------------------

@dataclass
class LLMConfig:
    """OpenAI-style chat-completion endpoint. The token comes from the environment only."""

    base_url: str | None = None
    model: str | None = None
    token_env: str = TOKEN_ENV
    timeout: float = 10.0
    retries: int = 1

    def check(self) -> None:
        missing = [k for k in ("base_url", "model") if not getattr(self, k)]
        if missing:
            raise UsageError(f"LLM backend needs llm.{' and llm.'.join(missing)} to be configured")


def llm_messages(prompt: str) -> list[dict]:
    return [
        {"role": "user", "content": _resource("llm_system_prompt.txt")},
        {"role": "assistant", "content": _resource("llm_ack.txt")},
        {"role": "user", "content": prompt},
    ]


def parse_llm_reply(reply: str, vocab: DescriptorVocab) -> list[str]:
    """Descriptors from a numbered-list reply, keeping only vocabulary members."""
    out = []
    for tok in _NUMBERED.findall(reply):
        if tok in vocab:
            d = vocab.canonical(tok)
            if d not in out:
                out.append(d)
        else:
            logger.warning("LLM proposed %r, which is not in the vocabulary", tok)
    return out


def _post_chat(cfg: LLMConfig, prompt: str) -> str:
    headers = {"Content-Type": "application/json"}
    token = os.environ.get(cfg.token_env)
    if token:
        headers["Authorization"] = f"Bearer {token}"
    body = {"model": cfg.model, "messages": llm_messages(prompt), "temperature": 0}
    url = cfg.base_url.rstrip("/") + "/chat/completions"
    last = None
    for _ in range(cfg.retries + 1):
        try:
            r = requests.post(url, data=json.dumps(body), headers=headers, timeout=cfg.timeout)
            r.raise_for_status()
            return r.json()["choices"][0]["message"]["content"]
        except (requests.RequestException, ValueError, KeyError, IndexError, TypeError) as e:
            last = e
    raise ConnectionError(f"chat completion failed: {last}")


def extract_llm(prompt: str, vocab: DescriptorVocab, cfg: LLMConfig) -> ExtractionResult:
    cfg.check()
    if not prompt or not prompt.strip():
        raise ExtractionError("empty prompt")
    try:
        found = parse_llm_reply(_post_chat(cfg, prompt), vocab)
    except ConnectionError as e:
        logger.warning("%s; falling back to lexical extraction", e)
        return extract_lexical(prompt, vocab)
    if not found:
        logger.warning("LLM reply had no usable descriptors; falling back to lexical extraction")
        return extract_lexical(prompt, vocab)
    return ExtractionResult(found, ["llm"] * len(found), prompt)


def extract_descriptors(prompt: str, vocab: DescriptorVocab, backend: str = "lexical",
                        llm: LLMConfig | None = None) -> ExtractionResult:
    if backend == "lexical":
        return extract_lexical(prompt, vocab)
    if backend == "llm":
        return extract_llm(prompt, vocab, llm or LLMConfig())
    raise UsageError(f"unknown extraction backend {backend!r}")


# -- editing -----------------------------------------------------------------

def _descriptor_id(ckpt: Checkpoint, x) -> int:
    if isinstance(x, (int, np.integer)):
        if not 0 <= x < len(ckpt.vocab):
            raise DataError(f"descriptor id {x} outside [0, {len(ckpt.vocab)})")
        return int(x)
    return ckpt.vocab.index(x)


def edit_once(ckpt: Checkpoint, s, x, alpha: float = DEFAULT_ALPHA, mode: str | None = None) -> np.ndarray:
    """Edit ``s`` towards descriptor ``x`` (id or name) with degree ``alpha``.

    Modes: ``full``; ``no_voice_res`` drops the residual recall;
    ``no_resmem`` interpolates raw encoder outputs ``alpha*t + (1-alpha)*s``;
    ``no_vadp`` adds the recalls ``t_hat + s_main`` and ignores ``alpha``.
    """
    mode = mode or ckpt.config.mode
    if mode not in MODES:
        raise DataError(f"unknown mode {mode!r}")
    s = np.asarray(s, dtype=np.float64)
    mem, enc = ckpt.model.mem, ckpt.model.enc
    if s.shape != (mem.dim,):
        raise DataError(f"source has shape {s.shape}, checkpoint dimension is {mem.dim}")
    if mode == "no_vadp":
        if alpha != DEFAULT_ALPHA:
            logger.warning("no_vadp mode ignores alpha=%s", alpha)
    elif not 0.0 <= alpha <= 1.0:
        raise DataError(f"alpha must lie in [0, 1], got {alpha}")

    xid = _descriptor_id(ckpt, x)
    t = memnet.encode_descriptor(enc, xid)
    if mode == "no_resmem":
        return alpha * t + (1.0 - alpha) * s
    if not np.any(t):
        raise DataError(f"descriptor {ckpt.vocab.descriptors[xid]!r} encodes to the zero vector")
    t_hat = memnet.readout_descriptor(mem, t).recalled
    s_main = memnet.readout_main(mem, s).recalled
    if mode == "no_vadp":
        return t_hat + s_main
    if mode == "no_voice_res":
        return alpha * t_hat + (1.0 - alpha) * s_main
    return alpha * t_hat + (1.0 - alpha) * s_main + memnet.readout_residual(mem, s).recalled


def edit_chain(ckpt: Checkpoint, s, descriptors: Sequence, alphas, mode: str | None = None,
               trace: list | None = None) -> np.ndarray:
    """Apply one edit per descriptor in order. ``alphas`` is a float or one value per descriptor."""
    if np.ndim(alphas) == 0:
        alphas = [float(alphas)] * len(descriptors)
    if len(alphas) != len(descriptors):
        raise DataError("need one alpha per descriptor")
    out = np.asarray(s, dtype=np.float64)
    for x, a in zip(descriptors, alphas):
        out = edit_once(ckpt, out, x, a, mode)
        if trace is not None:
            trace.append({"descriptor": x if isinstance(x, str) else ckpt.vocab.descriptors[x],
                          "alpha": a, "vec": out})
    return out


def edit_prompt(ckpt: Checkpoint, s, prompt: str, alpha=DEFAULT_ALPHA, backend: str = "lexical",
                mode: str | None = None, llm: LLMConfig | None = None, trace: list | None = None):
    """Extract descriptors from ``prompt`` and edit ``s`` sequentially.

    Returns ``(s_edit, extraction)``; intermediate outputs go to ``trace``.
    """
    found = extract_descriptors(prompt, ckpt.vocab, backend, llm)
    return edit_chain(ckpt, s, found.descriptors, alpha, mode, trace), found
