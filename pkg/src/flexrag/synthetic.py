"""Synthetic entity-fact QA world for training and directional evaluation.

The retrieval corpus states one set of true attribute values per entity.
All training text either omits evaluation entities' documents or scrambles
attribute values per demonstration, so the true facts are learnable only
from retrieved documents and models must copy answers out of context
rather than memorize them. The needle variant buries each fact sentence
inside distractor filler so uniform down-sampling usually drops the answer
while sentence-level selection keeps it.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

ATTRIBUTES = ["color", "size", "shape", "sound", "metal", "flavor"]

_VALUE_POOLS = {
    "color": ["crimson", "azure", "amber", "violet", "emerald", "ivory",
              "indigo", "scarlet", "teal", "ochre", "magenta", "cobalt",
              "maroon", "turquoise", "beige", "lavender", "olive", "coral",
              "charcoal", "bronze", "sapphire", "ruby", "jade", "pearl"],
    "size": ["tiny", "small", "narrow", "compact", "middling", "broad",
             "large", "huge", "vast", "immense", "towering", "minute",
             "slim", "bulky", "stout", "lanky", "wide", "short", "tall",
             "giant", "petite", "grand", "modest", "colossal"],
    "shape": ["round", "square", "oval", "spiral", "cubic", "conical",
              "flat", "curved", "jagged", "smooth", "angular", "twisted",
              "hollow", "solid", "pointed", "blunt", "forked", "coiled",
              "ridged", "domed", "tapered", "winding", "notched", "arched"],
    "sound": ["humming", "ringing", "buzzing", "whistling", "rumbling",
              "chiming", "clicking", "droning", "hissing", "purring",
              "crackling", "thudding", "pinging", "rustling", "booming",
              "squeaking", "ticking", "roaring", "murmuring", "clanging",
              "fizzing", "drumming", "wailing", "chirping"],
    "metal": ["iron", "copper", "tin", "zinc", "nickel", "silver",
              "gold", "lead", "mercury", "platinum", "titanium", "chrome",
              "brass", "steel", "cobaltine", "tungsten", "aluminum",
              "magnesium", "lithium", "palladium", "iridium", "osmium",
              "rhodium", "vanadium"],
    "flavor": ["sweet", "bitter", "sour", "salty", "smoky", "spicy",
               "minty", "tangy", "mellow", "sharp", "earthy", "fruity",
               "nutty", "peppery", "buttery", "zesty", "bland", "rich",
               "crisp", "syrupy", "herbal", "toasted", "creamy", "woody"],
}

_FILLER_WORDS = (
    "meanwhile travelers crossed quiet valleys and watched pale clouds "
    "drift over distant ridges while gentle winds carried dust along old "
    "roads past empty fields where silent mills waited under open skies "
    "and slow rivers wandered between mossy stones toward far harbors"
).split()

_CONSONANTS = "bdfgklmnprstvz"
_VOWELS = "aeiou"


@dataclass
class World:
    seed: int
    entities: list[str]
    facts: dict                 # (entity, attribute) -> true value
    train_entities: list[str] = field(default_factory=list)
    eval_entities: list[str] = field(default_factory=list)

    def question(self, entity: str, attribute: str) -> str:
        return f"what is the {attribute} of {entity}"

    def answer(self, entity: str, attribute: str) -> str:
        return self.facts[(entity, attribute)]


def _entity_names(rng: np.random.Generator, count: int) -> list[str]:
    syllables = [c + v for c in _CONSONANTS for v in _VOWELS]
    names: list[str] = []
    seen = set()
    while len(names) < count:
        parts = rng.integers(0, len(syllables), size=3)
        name = "".join(syllables[int(i)] for i in parts)
        if name not in seen:
            seen.add(name)
            names.append(name)
    return names


def build_world(seed: int = 0, n_entities: int = 520,
                eval_fraction: float = 0.4) -> World:
    rng = np.random.default_rng(seed)
    entities = _entity_names(rng, n_entities)
    facts = {}
    for e in entities:
        for a in ATTRIBUTES:
            pool = _VALUE_POOLS[a]
            facts[(e, a)] = pool[int(rng.integers(len(pool)))]
    n_eval = int(round(n_entities * eval_fraction))
    order = rng.permutation(n_entities)
    eval_set = [entities[int(i)] for i in order[:n_eval]]
    train_set = [entities[int(i)] for i in order[n_eval:]]
    return World(seed=seed, entities=entities, facts=facts,
                 train_entities=sorted(train_set),
                 eval_entities=sorted(eval_set))


def _fact_sentence(entity: str, attribute: str, value: str) -> str:
    return f"the {attribute} of {entity} is {value} ."


def _filler_sentence(rng: np.random.Generator, n_words: int = 8) -> str:
    idx = rng.integers(0, len(_FILLER_WORDS), size=n_words)
    return " ".join(_FILLER_WORDS[int(i)] for i in idx) + " ."


def compose_doc(entity: str, values: dict, style: str,
                rng: np.random.Generator, n_filler: int = 14) -> str:
    """One document stating the given attribute values of one entity."""
    attrs = list(ATTRIBUTES)
    rng.shuffle(attrs)
    facts = [_fact_sentence(entity, a, values[a]) for a in attrs]
    if style == "plain":
        return " ".join([f"{entity} profile ."] + facts)
    sentences = [_filler_sentence(rng) for _ in range(n_filler)]
    slots = sorted(rng.choice(n_filler + 1, size=len(attrs), replace=False))
    for offset, (slot, fact) in enumerate(zip(slots, facts)):
        sentences.insert(slot + offset, fact)
    return " ".join(sentences)


def _true_values(world: World, entity: str) -> dict:
    return {a: world.facts[(entity, a)] for a in ATTRIBUTES}


def _random_values(rng: np.random.Generator) -> dict:
    return {a: _VALUE_POOLS[a][int(rng.integers(len(_VALUE_POOLS[a])))]
            for a in ATTRIBUTES}


def make_corpus(world: World, style: str = "plain") -> list[dict]:
    """True-fact document per entity; this is what retrieval serves."""
    rng = np.random.default_rng(world.seed + (17 if style == "needle" else 3))
    return [{"doc_id": f"{style}-{e}", "title": e,
             "text": compose_doc(e, _true_values(world, e), style, rng)}
            for e in world.entities]


def make_copy_qa(world: World, n_samples: int, style_mix=("plain", "needle"),
                 seed_shift: int = 7, max_docs: int = 4,
                 max_words: int = 210) -> list[dict]:
    """QA samples whose documents carry freshly scrambled values, so the
    stated answer exists only inside the sample's own context."""
    rng = np.random.default_rng(world.seed + seed_shift)
    ents = world.entities
    records = []
    for i in range(n_samples):
        style = style_mix[int(rng.integers(len(style_mix)))]
        n_docs = 1 if style == "needle" else int(rng.integers(1, max_docs + 1))
        picks = rng.choice(len(ents), size=n_docs, replace=False)
        docs, words = [], 0
        for j, pi in enumerate(picks):
            e = ents[int(pi)]
            text = compose_doc(e, _random_values(rng), style, rng)
            if docs and words + len(text.split()) > max_words:
                break
            docs.append({"doc_id": f"copy-{i}-{j}", "entity": e, "text": text})
            words += len(text.split())
        target = docs[int(rng.integers(len(docs)))]
        attr = ATTRIBUTES[int(rng.integers(len(ATTRIBUTES)))]
        value = _extract_value(target["text"], target["entity"], attr)
        records.append({
            "id": f"copy-{i}",
            "question": world.question(target["entity"], attr),
            "answers": [value],
            "gold_doc_id": target["doc_id"],
            "docs": [{"doc_id": d["doc_id"], "text": d["text"]} for d in docs],
        })
    return records


def _extract_value(text: str, entity: str, attribute: str) -> str:
    marker = f"the {attribute} of {entity} is "
    at = text.index(marker) + len(marker)
    return text[at:].split()[0]


def make_pretrain_records(world: World, n_demos: int = 3000,
                          seed_shift: int = 11) -> list[dict]:
    """Stage-1 / base-model text: true-fact documents of training entities
    plus scrambled-value QA demonstrations in flat text form."""
    rng = np.random.default_rng(world.seed + seed_shift)
    records = []
    for style in ("plain", "needle"):
        srng = np.random.default_rng(world.seed + seed_shift + ord(style[0]))
        for e in world.train_entities:
            records.append({
                "id": f"lm-{style}-{e}",
                "text": compose_doc(e, _true_values(world, e), style, srng)})
    demos = make_copy_qa(world, n_demos, seed_shift=seed_shift + 2)
    for rec in demos:
        ctx = " ".join(d["text"] for d in rec["docs"])
        records.append({
            "id": f"demo-{rec['id']}",
            "text": f"{ctx} <q> {rec['question']} <a> {rec['answers'][0]} <eos>"})
    order = rng.permutation(len(records))
    return [records[int(i)] for i in order]


def make_eval_records(world: World, per_entity: int = 1,
                      seed_shift: int = 23) -> list[dict]:
    """True-fact questions over held-out entities; docs left empty so the
    evaluator retrieves them from the corpus index."""
    rng = np.random.default_rng(world.seed + seed_shift)
    records = []
    for e in world.eval_entities:
        attrs = rng.permutation(len(ATTRIBUTES))[:per_entity]
        for ai in attrs:
            a = ATTRIBUTES[int(ai)]
            records.append({"id": f"qa-{e}-{a}",
                            "question": world.question(e, a),
                            "answers": [world.answer(e, a)],
                            "gold_doc_id": f"plain-{e}", "docs": []})
    return records


def write_jsonl(path, records) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        for rec in records:
            f.write(json.dumps(rec, sort_keys=True) + "\n")
    return path


def build_benchmark(out_dir, seed: int = 0, n_entities: int = 520,
                    eval_questions: int = 220, n_demos: int = 3000,
                    n_finetune: int = 2500) -> dict:
    """Write corpus, pretrain, fine-tune, and eval files; returns paths."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    world = build_world(seed=seed, n_entities=n_entities)
    plain = make_corpus(world, "plain")
    needle = make_corpus(world, "needle")

    per_entity = max(1, -(-eval_questions // len(world.eval_entities)))
    eval_recs = make_eval_records(world, per_entity=per_entity)
    rng = np.random.default_rng(seed + 41)
    if len(eval_recs) > eval_questions:
        keep = sorted(rng.choice(len(eval_recs), size=eval_questions,
                                 replace=False))
        eval_recs = [eval_recs[int(i)] for i in keep]
    eval_needle = [dict(r, gold_doc_id=r["gold_doc_id"].replace("plain-", "needle-"))
                   for r in eval_recs]

    paths = {
        "corpus": write_jsonl(out / "corpus.jsonl", plain),
        "corpus_needle": write_jsonl(out / "corpus_needle.jsonl", needle),
        "pretrain": write_jsonl(out / "pretrain.jsonl",
                                make_pretrain_records(world, n_demos=n_demos)),
        "finetune": write_jsonl(out / "finetune.jsonl",
                                make_copy_qa(world, n_finetune, seed_shift=53)),
        "eval": write_jsonl(out / "eval.jsonl", eval_recs),
        "eval_needle": write_jsonl(out / "eval_needle.jsonl", eval_needle),
    }
    return {"world": world, "paths": paths}
