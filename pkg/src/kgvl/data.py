"""Multiple-choice instances, their JSON-lines format, and a synthetic task.

The synthetic task is built so that the correct response is connected to
the query only through a knowledge-base fact; see ``make_synthetic``.
"""

from __future__ import annotations

import itertools
import json
from dataclasses import dataclass, field

import numpy as np

from .kb import Fact, KnowledgeBase
from .pipeline import InstanceError, Region, image_size_from_regions, tokenize

MODES = ("QtoA", "QAtoR")
N_CHOICES = 4


@dataclass
class Instance:
    id: str
    query: list[str]
    responses: list[list[str]]
    regions: list[Region]
    gold: int
    mode: str = "QtoA"
    image_size: tuple[float, float] = field(default=(1.0, 1.0))
    raw: dict | None = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        if len(self.responses) != N_CHOICES:
            raise InstanceError(f"{self.id}: expected {N_CHOICES} responses, got {len(self.responses)}")
        if not 0 <= self.gold < N_CHOICES:
            raise InstanceError(f"{self.id}: gold index {self.gold} out of range")
        if self.mode not in MODES:
            raise InstanceError(f"{self.id}: unknown mode {self.mode!r}")

    @classmethod
    def from_json(cls, obj: dict, default_id: str = "") -> "Instance":
        iid = str(obj.get("id", default_id))
        try:
            query = tokenize(obj["query"])
            if obj.get("answer"):
                query += tokenize(obj["answer"])
            responses = [tokenize(r) for r in obj["responses"]]
            regions = [
                Region(r["bbox"], r["appearance"], r.get("label")) for r in obj["regions"]
            ]
            img = obj.get("image")
            size = (float(img["width"]), float(img["height"])) if img else image_size_from_regions(regions)
            gold = obj["gold"]
            if isinstance(gold, bool) or not isinstance(gold, int):
                raise InstanceError(f"gold must be an integer, got {gold!r}")
        except (KeyError, TypeError, ValueError) as exc:
            if isinstance(exc, InstanceError):
                raise InstanceError(f"{iid}: {exc}") from None
            raise InstanceError(f"{iid}: malformed instance ({type(exc).__name__}: {exc})") from None
        if size[0] <= 0 or size[1] <= 0:
            raise InstanceError(f"{iid}: image size must be positive")
        if not regions:
            raise InstanceError(f"{iid}: at least one region (the full image) is required")
        for r in regions:
            try:
                r.check(*size)
            except InstanceError as exc:
                raise InstanceError(f"{iid}: {exc}") from None
        x1, y1, x2, y2 = regions[0].bbox
        if (x1, y1, x2, y2) != (0.0, 0.0, size[0], size[1]):
            raise InstanceError(f"{iid}: first region must be the full image")
        return cls(iid, query, responses, regions, gold, obj.get("mode", "QtoA"), size, obj)


def instance_to_json(inst: Instance) -> dict:
    if inst.raw is not None:
        return inst.raw
    return {
        "id": inst.id,
        "mode": inst.mode,
        "query": " ".join(inst.query),
        "responses": [" ".join(r) for r in inst.responses],
        "gold": inst.gold,
        "image": {"width": inst.image_size[0], "height": inst.image_size[1]},
        "regions": [
            {"bbox": list(r.bbox), "appearance": r.appearance.tolist(), "label": r.label}
            for r in inst.regions
        ],
    }


def load_jsonl(path) -> list[Instance]:
    """Read instances; any malformed line raises InstanceError naming the line."""
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise InstanceError(f"{path}:{lineno}: invalid JSON ({exc.msg})") from None
            if not isinstance(obj, dict):
                raise InstanceError(f"{path}:{lineno}: expected a JSON object")
            out.append(Instance.from_json(obj, default_id=f"line{lineno}"))
    return out


def write_jsonl(instances, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for inst in instances:
            fh.write(json.dumps(instance_to_json(inst), sort_keys=True) + "\n")


# --- synthetic task -------------------------------------------------------

_SYLLABLES = ["ba", "ko", "ri", "tu", "me", "sa", "lo", "ni", "pe", "vu", "da", "zi"]
_RELATIONS = ["RelatedTo", "UsedFor", "AtLocation", "CapableOf"]
# short templates: every extra original token dilutes the attention that
# carries the knowledge link, and long ones left training on a plateau
_QUESTIONS = ["why {}", "what {}", "where {}"]
IMAGE_W, IMAGE_H = 640.0, 480.0
# region stubs carry no task signal; small appearance vectors keep them from
# swamping the token embeddings they are summed with
APPEARANCE_SCALE = 0.1


def concept_names(n: int) -> list[str]:
    """``n`` distinct made-up words built from a fixed syllable set."""
    size = 3
    while len(_SYLLABLES) ** size < n:
        size += 1
    return ["".join(p) for p in itertools.islice(itertools.product(_SYLLABLES, repeat=size), n)]


def _regions(rng, d_app, n_boxes=1):
    regions = [Region((0.0, 0.0, IMAGE_W, IMAGE_H), np.round(APPEARANCE_SCALE * rng.normal(size=d_app), 4), None)]
    for _ in range(n_boxes):
        x = np.sort(rng.choice(np.arange(0, int(IMAGE_W) + 1, 8), size=2, replace=False))
        y = np.sort(rng.choice(np.arange(0, int(IMAGE_H) + 1, 8), size=2, replace=False))
        regions.append(
            Region((float(x[0]), float(y[0]), float(x[1]), float(y[1])),
                   np.round(APPEARANCE_SCALE * rng.normal(size=d_app), 4), None)
        )
    return regions


def _linked(kb_pairs, tokens, query_tokens):
    return any((t, q) in kb_pairs for t in tokens for q in query_tokens)


def make_synthetic(seed: int = 0, n_train: int = 4000, n_eval: int = 1000, *,
                   n_concepts: int = 1200, n_topics: int = 12, d_app: int = 16,
                   rationales: bool = False):
    """Generate ``(train, eval, kb)`` for the knowledge-dependent choice task.

    The knowledge base is a set of disjoint stars: ``n_topics`` topic words,
    each joined by one fact to its own share of ``n_concepts`` concepts.
    A question names one topic. The gold response is a concept of that
    topic's star; every other response is a concept of a different star,
    so it has no knowledge-base path to the question at all.

    Questions come in groups of four that share the same four responses,
    each response gold for exactly one question of the group, so nothing
    about a response on its own predicts whether it is gold. Each star's
    concepts are split in half between train and eval, so eval responses
    use words never seen in training text and only the facts tie them to
    the question.

    With ``rationales`` each id also gets a QAtoR instance whose query is
    the question plus the gold answer and whose gold rationale is a second
    concept of the question's star.
    """
    if n_topics < N_CHOICES + 1:
        raise ValueError(f"need at least {N_CHOICES + 1} topics")
    if n_concepts < 4 * n_topics:
        raise ValueError("need at least four concepts per topic")
    rng = np.random.default_rng(seed)
    names = concept_names(n_topics + n_concepts)
    names = [names[i] for i in rng.permutation(len(names))]
    topics, concepts = names[:n_topics], names[n_topics:]
    facts = []
    stars = {"train": [[] for _ in topics], "eval": [[] for _ in topics]}
    for i, c in enumerate(concepts):
        t = i % n_topics
        w = float(np.round(rng.uniform(1.0, 4.0), 2))
        facts.append(Fact(c, _RELATIONS[rng.integers(len(_RELATIONS))], topics[t], w))
        stars["train" if (i // n_topics) % 2 == 0 else "eval"][t].append(c)
    kb = KnowledgeBase(facts)
    kb_pairs = {(f.head, f.tail) for f in facts} | {(f.tail, f.head) for f in facts}

    def pick(star):
        return star[rng.integers(len(star))]

    def generate(name, count):
        star = stars[name]
        out = []
        made = 0
        while made < count:
            qtopics = rng.permutation(n_topics)[:N_CHOICES]
            texts = [pick(star[t]) for t in qtopics]
            for j, t in enumerate(qtopics):
                if made == count:
                    break
                order = rng.permutation(N_CHOICES)
                responses = [texts[i] for i in order]
                gold_idx = int(np.flatnonzero(order == j)[0])
                question = _QUESTIONS[rng.integers(len(_QUESTIONS))].format(topics[t])
                regions = _regions(rng, d_app)
                iid = f"{name}-{made:05d}"
                qa = _make_instance(iid, "QtoA", question, None, responses, gold_idx, regions)
                _assert_single_link(qa, kb_pairs)
                out.append(qa)
                if rationales:
                    out.append(rationale(qa, t, texts[j], star, regions))
                made += 1
        return out

    def rationale(qa, t, gold, star, regions):
        """QAtoR partner: the gold rationale is another concept of the question's star."""
        others = [i for i in rng.permutation(n_topics) if i != t][:N_CHOICES - 1]
        r_texts = [pick(star[i]) for i in others]
        r_idx = int(rng.integers(N_CHOICES))
        r_texts.insert(r_idx, pick([c for c in star[t] if c != gold] or star[t]))
        answer = qa.raw["responses"][qa.gold]
        qr = _make_instance(qa.id, "QAtoR", qa.raw["query"], answer, r_texts, r_idx, regions)
        _assert_single_link(qr, kb_pairs)
        return qr

    train = generate("train", n_train)
    evals = generate("eval", n_eval)
    return train, evals, kb


def _make_instance(iid, mode, question, answer, responses, gold, regions):
    obj = {
        "id": iid,
        "mode": mode,
        "query": question,
        "responses": responses,
        "gold": gold,
        "image": {"width": IMAGE_W, "height": IMAGE_H},
        "regions": [
            {"bbox": list(r.bbox), "appearance": r.appearance.tolist(), "label": r.label}
            for r in regions
        ],
    }
    if answer is not None:
        obj["answer"] = answer
    return Instance.from_json(obj)


def _assert_single_link(inst, kb_pairs):
    linked = [_linked(kb_pairs, r, inst.query) for r in inst.responses]
    assert sum(linked) == 1 and linked[inst.gold], f"{inst.id}: expected exactly the gold response linked"
