"""Grid-world referring games with exact truth oracles.

A game places a handful of coloured shapes on a coarse grid, picks a target and emits a
templated yes/no dialogue (or, in ReferIt style, a single referring phrase) about it. Every
question is answerable by :func:`oracle_truth`, so the set of objects consistent with a
dialogue can always be recovered by brute force.
"""

from __future__ import annotations

import hashlib
import itertools
import json
import logging
from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .errors import DatasetParseError, GenerationError, InputError
from .layers import spatial_vector

logger = logging.getLogger(__name__)

COLORS = {"red": (1.0, 0.0, 0.0), "green": (0.0, 1.0, 0.0), "blue": (0.0, 0.0, 1.0), "yellow": (1.0, 1.0, 0.0)}
SHAPES = ("square", "circle", "triangle")
SIZES = ("small", "large")
POSITIONS = ("left", "right", "top", "bottom")
PATTERNS = ("striped", "dotted")
ANSWERS = ("yes", "no", "n/a")
ANSWER_TOKENS = {"yes": "<yes>", "no": "<no>", "n/a": "<n/a>"}
RESERVED = ("<pad>", "<unk>", "<yes>", "<no>", "<n/a>", "<?>")
GAME_FIELDS = {"id", "grid", "objects", "target", "dialogue", "split", "task", "expression"}
OBJECT_FIELDS = {"cat", "color", "shape", "size", "row", "col", "bbox", "mask_rle"}


@dataclass
class GameConfig:
    grid: int = 7
    cell_px: int = 4
    phi_min: int = 2
    phi_max: int = 5
    dialogue_min: int = 3
    dialogue_max: int = 6
    colors: tuple[str, ...] = tuple(COLORS)
    shapes: tuple[str, ...] = SHAPES
    sizes: tuple[str, ...] = SIZES
    na_rate: float = 0.1
    referit: bool = False

    def validate(self) -> None:
        if not (self.colors and self.shapes and self.sizes):
            raise GenerationError("attribute sets must be nonempty")
        if not 2 <= self.phi_min <= self.phi_max <= 8:
            raise GenerationError(f"object count range must satisfy 2 <= min <= max <= 8, got [{self.phi_min}, {self.phi_max}]")
        if self.dialogue_min > self.dialogue_max or self.dialogue_min < 0:
            raise GenerationError("invalid dialogue length range")

    @property
    def image_size(self) -> int:
        return self.grid * self.cell_px


@dataclass
class GameObject:
    color: str
    shape: str
    size: str
    row: int
    col: int
    cell_px: int

    @property
    def cat(self) -> int:
        return SHAPES.index(self.shape)

    @property
    def span(self) -> int:
        return 2 if self.size == "large" else 1

    @property
    def bbox(self) -> tuple[int, int, int, int]:
        s = self.span * self.cell_px
        return (self.col * self.cell_px, self.row * self.cell_px, s, s)

    def local_mask(self) -> np.ndarray:
        p = self.span * self.cell_px
        ii, jj = np.mgrid[0:p, 0:p]
        if self.shape == "square":
            return np.ones((p, p), dtype=bool)
        if self.shape == "circle":
            r = p / 2.0
            m = (ii + 0.5 - r) ** 2 + (jj + 0.5 - r) ** 2 <= r * r
        else:
            m = jj <= ii
        return m

    def mask(self, h: int, w: int) -> np.ndarray:
        out = np.zeros((h, w), dtype=bool)
        x, y, s, _ = self.bbox
        out[y : y + s, x : x + s] = self.local_mask()
        return out

    def spatial(self, img_size: int) -> np.ndarray:
        return spatial_vector(self.bbox, img_size, img_size)

    def positions(self, grid: int) -> set[str]:
        half = grid / 2.0
        cx, cy = self.col + self.span / 2.0, self.row + self.span / 2.0
        out = set()
        if cx < half:
            out.add("left")
        if cx > half:
            out.add("right")
        if cy < half:
            out.add("top")
        if cy > half:
            out.add("bottom")
        return out

    def attributes(self) -> tuple:
        return (self.color, self.shape, self.size, self.row, self.col)


@dataclass
class Game:
    id: int
    grid: int
    cell_px: int
    objects: list[GameObject]
    target: int
    dialogue: list[tuple[list[str], str]] = field(default_factory=list)
    expression: list[str] | None = None
    split: str = "train"
    task: str = "guesswhat"

    @property
    def image_size(self) -> int:
        return self.grid * self.cell_px

    @property
    def target_object(self) -> GameObject:
        return self.objects[self.target]

    def image(self) -> np.ndarray:
        return render_image(self.objects, self.grid, self.cell_px)

    def language(self) -> list[list[str]]:
        """Token lists making up the linguistic input (questions, or the referring phrase)."""
        if self.expression is not None:
            return [list(self.expression)]
        return [list(q) for q, _ in self.dialogue]


# ---------------------------------------------------------------------------
# rendering
# ---------------------------------------------------------------------------

def render_image(objects: Sequence[GameObject], grid: int, cell_px: int = 4) -> np.ndarray:
    """``3 x H x W`` image in [0, 1]; background is black."""
    n = grid * cell_px
    img = np.zeros((3, n, n))
    for obj in objects:
        m = obj.mask(n, n)
        for ch, v in enumerate(COLORS[obj.color]):
            img[ch][m] = v
    return img


def crop_image(image: np.ndarray, bbox: Sequence[int]) -> np.ndarray:
    """Nearest-neighbour re-render of the bbox sub-image at full image resolution."""
    _, h, w = image.shape
    x, y, bw, bh = bbox
    rows = y + (np.arange(h) * bh) // h
    cols = x + (np.arange(w) * bw) // w
    return image[:, rows][:, :, cols]


def rescale_mask(mask: np.ndarray, h: int, w: int) -> np.ndarray:
    """Area-average a binary mask down (or nearest up) to ``h x w`` floats."""
    H, W = mask.shape
    m = mask.astype(float)
    if H % h == 0 and W % w == 0:
        return m.reshape(h, H // h, w, W // w).mean(axis=(1, 3))
    rows = (np.arange(h) * H) // h
    cols = (np.arange(w) * W) // w
    return m[rows][:, cols]


# ---------------------------------------------------------------------------
# questions and truth
# ---------------------------------------------------------------------------

def question_tokens(kind: str, value: str) -> list[str]:
    if kind == "color" or kind == "size" or kind == "pattern":
        return ["is", "it", value, "?"]
    if kind == "shape":
        return ["is", "it", "a", value, "?"]
    if kind == "position":
        return ["is", "it", "in", "the", value, "?"]
    raise InputError(f"unknown question kind {kind!r}")


def parse_predicate(words: Sequence[str]) -> tuple[str, str]:
    w = list(words)
    if len(w) == 1 and w[0] in COLORS:
        return "color", w[0]
    if len(w) == 1 and w[0] in SIZES:
        return "size", w[0]
    if len(w) == 1 and w[0] in PATTERNS:
        return "pattern", w[0]
    if len(w) == 2 and w[0] == "a" and w[1] in SHAPES:
        return "shape", w[1]
    if len(w) == 3 and w[:2] == ["in", "the"] and w[2] in POSITIONS:
        return "position", w[2]
    raise InputError(f"cannot parse predicate {' '.join(w)!r}")


def parse_question(tokens: Sequence[str]) -> tuple[str, str]:
    t = list(tokens)
    if len(t) < 4 or t[:2] != ["is", "it"] or t[-1] != "?":
        raise InputError(f"unparseable question {' '.join(t)!r}")
    return parse_predicate(t[2:-1])


def _holds(kind: str, value: str, obj: GameObject, grid: int) -> str:
    if kind == "pattern":
        return "n/a"
    if kind == "position":
        ok = value in obj.positions(grid)
    else:
        ok = getattr(obj, kind) == value
    return "yes" if ok else "no"


def oracle_truth(question: Sequence[str], target: GameObject, grid: int) -> str:
    """Exact yes/no/n/a answer of a templated question about ``target``."""
    kind, value = parse_question(question)
    return _holds(kind, value, target, grid)


def parse_expression(tokens: Sequence[str]) -> list[tuple[str, str]]:
    """Predicates of a referring phrase ``the [size] [color] (shape|object) [in the pos]``."""
    t = list(tokens)
    if not t or t[0] != "the":
        raise InputError(f"unparseable expression {' '.join(t)!r}")
    preds, i = [], 1
    if i < len(t) and t[i] in SIZES:
        preds.append(("size", t[i]))
        i += 1
    if i < len(t) and t[i] in COLORS:
        preds.append(("color", t[i]))
        i += 1
    if i >= len(t) or (t[i] not in SHAPES and t[i] != "object"):
        raise InputError(f"expression lacks a head noun: {' '.join(t)!r}")
    if t[i] in SHAPES:
        preds.append(("shape", t[i]))
    i += 1
    if i < len(t):
        if t[i : i + 2] != ["in", "the"] or i + 3 != len(t) or t[i + 2] not in POSITIONS:
            raise InputError(f"unparseable location in {' '.join(t)!r}")
        preds.append(("position", t[i + 2]))
    return preds


def consistent_set(dialogue: Sequence[tuple[Sequence[str], str]], objects: Sequence[GameObject], grid: int,
                   expression: Sequence[str] | None = None) -> set[int]:
    """Indices of the objects whose truth answers reproduce every (question, answer) pair."""
    keep = set(range(len(objects)))
    for q, a in dialogue:
        keep = {i for i in keep if oracle_truth(q, objects[i], grid) == a}
    if expression is not None:
        for kind, value in parse_expression(expression):
            keep = {i for i in keep if _holds(kind, value, objects[i], grid) == "yes"}
    return keep


def iou(box_a: Sequence[float], box_b: Sequence[float]) -> float:
    """Intersection over union of two ``(x, y, w, h)`` boxes."""
    ax, ay, aw, ah = box_a
    bx, by, bw, bh = box_b
    if aw <= 0 or ah <= 0 or bw <= 0 or bh <= 0:
        raise InputError(f"boxes need positive width and height, got {tuple(box_a)} and {tuple(box_b)}")
    iw = max(0.0, min(ax + aw, bx + bw) - max(ax, bx))
    ih = max(0.0, min(ay + ah, by + bh) - max(ay, by))
    inter = iw * ih
    return inter / (aw * ah + bw * bh - inter)


# ---------------------------------------------------------------------------
# generation
# ---------------------------------------------------------------------------

def _place(rng: np.random.Generator, specs: list[tuple[str, str, str]], gcfg: GameConfig) -> list[GameObject]:
    for _ in range(50):
        occupied = np.zeros((gcfg.grid, gcfg.grid), dtype=bool)
        objects = []
        for color, shape, size in specs:
            s = 2 if size == "large" else 1
            free = [
                (r, c)
                for r in range(gcfg.grid - s + 1)
                for c in range(gcfg.grid - s + 1)
                if not occupied[r : r + s, c : c + s].any()
            ]
            if not free:
                break
            r, c = free[rng.integers(len(free))]
            occupied[r : r + s, c : c + s] = True
            objects.append(GameObject(color, shape, size, r, c, gcfg.cell_px))
        if len(objects) == len(specs):
            return objects
    raise GenerationError(f"cannot place {len(specs)} objects on a {gcfg.grid}x{gcfg.grid} grid")


def _all_questions(gcfg: GameConfig) -> list[list[str]]:
    qs = [question_tokens("color", c) for c in gcfg.colors]
    qs += [question_tokens("shape", s) for s in gcfg.shapes]
    qs += [question_tokens("size", s) for s in gcfg.sizes]
    qs += [question_tokens("position", p) for p in POSITIONS]
    return qs


def _dialogue(rng: np.random.Generator, objects: list[GameObject], target: int, gcfg: GameConfig,
              length: int) -> list[tuple[list[str], str]]:
    pool = _all_questions(gcfg)
    asked: set[tuple[str, ...]] = set()
    cands = set(range(len(objects)))
    dialogue = []
    while len(dialogue) < length or (len(cands) > 1 and len(dialogue) < max(length, gcfg.dialogue_max)):
        if len(cands) > 1:
            options = [
                q for q in pool
                if tuple(q) not in asked and len({oracle_truth(q, objects[i], gcfg.grid) for i in cands}) > 1
            ]
        elif rng.random() < gcfg.na_rate:
            options = [question_tokens("pattern", p) for p in PATTERNS]
        else:
            options = [q for q in pool if tuple(q) not in asked]
        if not options:
            break
        q = options[rng.integers(len(options))]
        a = oracle_truth(q, objects[target], gcfg.grid)
        asked.add(tuple(q))
        cands = {i for i in cands if oracle_truth(q, objects[i], gcfg.grid) == a}
        dialogue.append((list(q), a))
    return dialogue


def _satisfies(obj: GameObject, preds, grid: int) -> bool:
    return all(_holds(k, v, obj, grid) == "yes" for k, v in preds)


def _expression(rng: np.random.Generator, objects: list[GameObject], target: int, gcfg: GameConfig) -> list[str]:
    tgt = objects[target]
    preds = [("size", tgt.size), ("color", tgt.color), ("shape", tgt.shape)]
    preds += [("position", p) for p in sorted(tgt.positions(gcfg.grid))]
    for r in range(1, len(preds) + 1):
        choices = [
            combo for combo in itertools.combinations(preds, r)
            if sum(k == "position" for k, _ in combo) <= 1
            and not any(_satisfies(o, combo, gcfg.grid) for i, o in enumerate(objects) if i != target)
        ]
        if choices:
            combo = dict(choices[rng.integers(len(choices))])
            words = ["the"]
            if "size" in combo:
                words.append(combo["size"])
            if "color" in combo:
                words.append(combo["color"])
            words.append(combo.get("shape", "object"))
            if "position" in combo:
                words += ["in", "the", combo["position"]]
            return words
    raise GenerationError("target cannot be singled out by a referring phrase")


def generate_game(rng: np.random.Generator, gcfg: GameConfig, game_id: int = 0, split: str = "train") -> Game:
    gcfg.validate()
    combos = list(itertools.product(gcfg.colors, gcfg.shapes, gcfg.sizes))
    phi = int(rng.integers(gcfg.phi_min, gcfg.phi_max + 1))
    if phi > len(combos):
        raise GenerationError(f"only {len(combos)} distinct attribute combinations for {phi} objects")
    picks = rng.choice(len(combos), size=phi, replace=False)
    objects = _place(rng, [combos[i] for i in picks], gcfg)
    target = int(rng.integers(phi))
    if gcfg.referit or gcfg.dialogue_max == 0:
        return Game(game_id, gcfg.grid, gcfg.cell_px, objects, target, [], _expression(rng, objects, target, gcfg),
                    split, "referit")
    length = int(rng.integers(gcfg.dialogue_min, gcfg.dialogue_max + 1))
    dialogue = _dialogue(rng, objects, target, gcfg, length)
    return Game(game_id, gcfg.grid, gcfg.cell_px, objects, target, dialogue, None, split)


def split_of(game_id: int, sizes: tuple[int, int, int] | None = None) -> str:
    """Deterministic split: 80/10/10 by a hash of the id, or contiguous id ranges when sizes are given."""
    if sizes is not None:
        n_train, n_valid, _ = sizes
        return "train" if game_id < n_train else "valid" if game_id < n_train + n_valid else "test"
    bucket = int(hashlib.sha256(str(game_id).encode()).hexdigest(), 16) % 10
    return "train" if bucket < 8 else "valid" if bucket == 8 else "test"


def generate_dataset(seed: int, n: int, gcfg: GameConfig, split_sizes: tuple[int, int, int] | None = None) -> list[Game]:
    """Each game draws from its own sub-seed ``(seed, index)``, so datasets are prefix-stable."""
    games = []
    for i in range(n):
        rng = np.random.default_rng([seed, i])
        games.append(generate_game(rng, gcfg, i, split_of(i, split_sizes)))
    return games


# ---------------------------------------------------------------------------
# vocabulary
# ---------------------------------------------------------------------------

def normalize_token(tok: str) -> str:
    return "<?>" if tok == "?" else tok


class Vocabulary:
    """Token ids; words seen two or fewer times in the building corpus map to ``<unk>``."""

    def __init__(self, tokens: Sequence[str]):
        self.itos = list(tokens)
        self.stoi = {t: i for i, t in enumerate(self.itos)}

    def __len__(self) -> int:
        return len(self.itos)

    def __contains__(self, tok: str) -> bool:
        return tok in self.stoi

    def id(self, tok: str) -> int:
        return self.stoi.get(normalize_token(tok), self.stoi["<unk>"])

    def encode(self, tokens: Iterable[str]) -> list[int]:
        return [self.id(t) for t in tokens]

    def to_list(self) -> list[str]:
        return list(self.itos)


def build_vocabulary(corpus: Iterable[Sequence[str]], min_count: int = 3) -> Vocabulary:
    counts: Counter[str] = Counter()
    order: list[str] = []
    for seq in corpus:
        for tok in seq:
            tok = normalize_token(tok)
            if tok not in counts:
                order.append(tok)
            counts[tok] += 1
    words = [t for t in order if counts[t] >= min_count and t not in RESERVED]
    return Vocabulary(list(RESERVED) + words)


def game_corpus(games: Iterable[Game]) -> list[list[str]]:
    corpus = []
    for g in games:
        corpus.extend(g.language())
        corpus.extend([[ANSWER_TOKENS[a]] for _, a in g.dialogue])
    return corpus


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------

def mask_to_rle(mask: np.ndarray) -> list[int]:
    """Alternating run lengths over the row-major flattened mask, starting with a (possibly empty) zero run."""
    flat = mask.reshape(-1).astype(np.int8)
    change = np.flatnonzero(np.diff(flat)) + 1
    bounds = np.concatenate([[0], change, [flat.size]])
    runs = np.diff(bounds).tolist()
    if flat.size and flat[0] == 1:
        runs = [0] + runs
    return [int(r) for r in runs]


def rle_to_mask(runs: Sequence[int], h: int, w: int) -> np.ndarray:
    flat = np.zeros(h * w, dtype=bool)
    pos, val = 0, False
    for r in runs:
        if val:
            flat[pos : pos + r] = True
        pos += r
        val = not val
    if pos != h * w:
        raise ValueError(f"run lengths cover {pos} pixels, expected {h * w}")
    return flat.reshape(h, w)


def game_to_dict(game: Game) -> dict:
    n = game.image_size
    d = {
        "id": game.id,
        "grid": {"cells": game.grid, "cell_px": game.cell_px},
        "objects": [
            {
                "cat": o.cat, "color": o.color, "shape": o.shape, "size": o.size, "row": o.row, "col": o.col,
                "bbox": list(o.bbox), "mask_rle": mask_to_rle(o.mask(n, n)),
            }
            for o in game.objects
        ],
        "target": game.target,
        "dialogue": [{"q": list(q), "a": a} for q, a in game.dialogue],
        "split": game.split,
        "task": game.task,
    }
    if game.expression is not None:
        d["expression"] = list(game.expression)
    return d


def game_from_dict(d: dict) -> Game:
    grid = d["grid"]
    cells, cell_px = (grid["cells"], grid["cell_px"]) if isinstance(grid, dict) else (int(grid), 4)
    objects = []
    for o in d["objects"]:
        extra = set(o) - OBJECT_FIELDS
        if extra:
            logger.warning("ignoring unknown object fields %s", sorted(extra))
        obj = GameObject(o["color"], o["shape"], o["size"], int(o["row"]), int(o["col"]), cell_px)
        if tuple(o["bbox"]) != obj.bbox:
            raise ValueError(f"bbox {o['bbox']} disagrees with attributes (expected {list(obj.bbox)})")
        objects.append(obj)
    dialogue = [(list(p["q"]), p["a"]) for p in d["dialogue"]]
    for _, a in dialogue:
        if a not in ANSWERS:
            raise ValueError(f"invalid answer {a!r}")
    return Game(int(d["id"]), cells, cell_px, objects, int(d["target"]), dialogue, d.get("expression"),
                d.get("split", "train"), d.get("task", "guesswhat"))


def write_dataset(path, games: Iterable[Game]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for g in games:
            fh.write(json.dumps(game_to_dict(g), separators=(",", ":")) + "\n")


def read_dataset(path) -> list[Game]:
    games = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                d = json.loads(line)
                extra = set(d) - GAME_FIELDS
                if extra:
                    logger.warning("line %d: ignoring unknown fields %s", lineno, sorted(extra))
                games.append(game_from_dict(d))
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise DatasetParseError(lineno, f"malformed game record ({exc})") from exc
    return games
