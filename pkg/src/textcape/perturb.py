"""Query occlusion masks and keypoint-description perturbations."""
from __future__ import annotations

import re
from importlib import resources
from pathlib import Path

import numpy as np

MASK_TOLERANCE = 0.02
TEXT_MODES = ("identity", "synonym", "typo")


def apply_mask(image: np.ndarray, fraction: float, rng_seed: int = 0, fill=0,
               tolerance: float = MASK_TOLERANCE) -> np.ndarray:
    """Cover ``fraction`` of the pixels with constant axis-aligned rectangles."""
    if not 0.0 <= fraction <= 1.0:
        raise ValueError(f"mask fraction must be in [0, 1], got {fraction}")
    out = np.array(image, copy=True)
    if fraction == 0:
        return out
    h, w = out.shape[:2]
    if fraction == 1:
        out[...] = fill
        return out
    rng = np.random.default_rng(rng_seed)
    covered = np.zeros((h, w), dtype=bool)
    total = h * w
    lo, hi = (fraction - tolerance) * total, (fraction + tolerance) * total
    count = 0
    while count < lo:
        # rectangle sides scale with the remaining deficit so the loop converges
        remaining = max(fraction * total - count, 1.0)
        side = max(1, int(np.sqrt(remaining) * rng.uniform(0.3, 1.0)))
        rh = int(np.clip(side * rng.uniform(0.5, 2.0), 1, h))
        rw = int(np.clip(remaining / rh * rng.uniform(0.2, 1.0), 1, w))
        y0 = int(rng.integers(0, h - rh + 1))
        x0 = int(rng.integers(0, w - rw + 1))
        region = covered[y0:y0 + rh, x0:x0 + rw]
        new = count + region.size - int(region.sum())
        if new > hi:
            continue
        region[...] = True
        count = new
    out[covered] = fill
    return out


def load_synonym_table(path: str | Path | None = None) -> dict[str, str]:
    """Tab-separated ``phrase<TAB>replacement`` lines; ``#`` starts a comment."""
    if path is None:
        text = resources.files("textcape").joinpath("data/synonyms.tsv").read_text(encoding="utf-8")
    else:
        text = Path(path).read_text(encoding="utf-8")
    table = {}
    for line in text.splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        src, sep, dst = line.partition("\t")
        if not sep or not src.strip() or not dst.strip():
            raise ValueError(f"bad synonym line {line!r}")
        table[src.strip().lower()] = dst.strip()
    return table


def apply_synonyms(description: str, table: dict[str, str]) -> str:
    if not table:
        return description
    # longest phrases first so "head top" wins over a shorter overlapping entry
    keys = sorted(table, key=len, reverse=True)
    pattern = re.compile(r"\b(" + "|".join(re.escape(k) for k in keys) + r")\b", re.IGNORECASE)
    return pattern.sub(lambda m: table[m.group(0).lower()], description)


def _typo(word: str, rng: np.random.Generator) -> str:
    ops = ["drop", "duplicate"]
    swappable = [i for i in range(len(word) - 1) if word[i] != word[i + 1]]
    if swappable:
        ops.append("swap")
    if len(word) < 2:
        ops = ["duplicate"]
    op = ops[int(rng.integers(len(ops)))]
    if op == "swap":
        i = swappable[int(rng.integers(len(swappable)))]
        return word[:i] + word[i + 1] + word[i] + word[i + 2:]
    i = int(rng.integers(len(word)))
    if op == "drop":
        return word[:i] + word[i + 1:]
    return word[:i] + word[i] + word[i:]


def text_perturb(descriptions: list[str], mode: str, rng_seed: int = 0,
                 synonym_table: dict[str, str] | None = None) -> list[str]:
    """Return modified copies of ``descriptions``.

    ``typo`` applies one character edit to one random word of every
    description; ``synonym`` rewrites table phrases.
    """
    if mode not in TEXT_MODES:
        raise ValueError(f"unknown perturbation mode {mode!r}; expected one of {TEXT_MODES}")
    if mode == "identity":
        return list(descriptions)
    if mode == "synonym":
        if synonym_table is None:
            raise ValueError("synonym mode needs a synonym table")
        return [apply_synonyms(d, synonym_table) for d in descriptions]
    rng = np.random.default_rng(rng_seed)
    out = []
    for d in descriptions:
        words = d.split(" ")
        candidates = [i for i, wd in enumerate(words) if wd]
        i = candidates[int(rng.integers(len(candidates)))]
        words[i] = _typo(words[i], rng)
        out.append(" ".join(words))
    return out
