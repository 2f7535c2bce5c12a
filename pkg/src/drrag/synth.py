"""Synthetic two-hop corpora.

Each query asks for a relation of a relative of a *head* entity::

    Who is the spouse of the child of Dabe?

and comes with

* a static document (titled by the head) linking the head to a *bridge*
  entity: ``Dabe son Kilo.`` It shares the head token with the query;
* a dynamic document (titled by the bridge) holding the answer:
  ``Kilo wife Rumo.`` It shares no token with the query, only the bridge
  token with the static document;
* distractors that repeat the query's relation word but not the bridge:
  ``Temi spouse Vaso.``

Under the hashed embedder, token overlap alone is not enough: unrelated
tokens can land in the same bucket. The generator therefore gives every
query's head and bridge tokens hash buckets that no other token in the
corpus uses, and keeps template words in buckets of their own. Entity names
come from a fixed syllable vocabulary.
"""

from __future__ import annotations

import itertools
import random
from dataclasses import dataclass, field


from ._validation import check_positive_int
from .corpus import Document, tokenize, write_corpus
from .evaluation import QueryRecord, write_dataset
from .retrievers import HashingEmbedder, concat_query

_ONSETS = "bdfgklmnprstvzh"
_VOWELS = "aeiou"
SYLLABLES = [c + v for c in _ONSETS for v in _VOWELS]

QUERY_WORDS = ("who", "is", "the", "of")
# (word in the question and distractors, word in the dynamic document)
RELATIONS = (
    ("spouse", "wife"), ("employer", "employee"), ("mentor", "pupil"),
    ("rival", "opponent"), ("sponsor", "patron"), ("teacher", "student"),
    ("partner", "husband"), ("landlord", "tenant"), ("guardian", "ward"),
)
# (word in the question, word in the static document)
HOPS = (
    ("child", "son"), ("parent", "father"), ("sibling", "brother"),
    ("grandchild", "granddaughter"), ("cousin", "kinsman"),
)


class SynthError(ValueError):
    """The requested spec cannot satisfy the construction constraints."""


@dataclass(frozen=True)
class SynthSpec:
    num_queries: int = 100
    distractors_per_query: int = 3
    # distinct bridge entities available; bridges are never shared between queries
    bridge_entity_pool: int | None = None
    vocab_size: int = 20000
    seed: int = 7
    embed_dim: int = 256

    def validate(self) -> None:
        check_positive_int(self.num_queries, "num_queries")
        if self.distractors_per_query < 0:
            raise SynthError("distractors_per_query must be >= 0")
        check_positive_int(self.vocab_size, "vocab_size")
        check_positive_int(self.embed_dim, "embed_dim")
        pool = self.bridge_entity_pool
        if pool is not None and pool < self.num_queries:
            raise SynthError(
                f"bridge_entity_pool ({pool}) < num_queries ({self.num_queries}): "
                "bridge entities would repeat across queries"
            )


@dataclass
class SynthInstance:
    query: QueryRecord
    static: Document
    dynamic: Document
    distractors: list[Document]
    head: str
    bridge: str
    answer: str
    relation: tuple[str, str]
    hop: tuple[str, str]

    @property
    def documents(self) -> list[Document]:
        return [self.static, *self.distractors, self.dynamic]


@dataclass
class SynthResult:
    instances: list[SynthInstance]
    embedder: HashingEmbedder
    relations: list[tuple[str, str]] = field(default_factory=list)
    hops: list[tuple[str, str]] = field(default_factory=list)

    @property
    def documents(self) -> list[Document]:
        return [d for inst in self.instances for d in inst.documents]

    @property
    def queries(self) -> list[QueryRecord]:
        return [inst.query for inst in self.instances]


def vocabulary(size: int) -> list[str]:
    """First ``size`` words of the fixed two- then three-syllable enumeration."""
    words = []
    for n in itertools.count(2):
        for combo in itertools.product(SYLLABLES, repeat=n):
            words.append("".join(combo))
            if len(words) == size:
                return words


def _pick_templates(embedder: HashingEmbedder):
    used = set()
    for w in QUERY_WORDS:
        b = embedder.bucket(w)
        if b in used:
            raise SynthError(f"query template words collide at embed_dim={embedder.dim}")
        used.add(b)

    def fit(pairs):
        kept = []
        for pair in pairs:
            buckets = {embedder.bucket(w) for w in pair}
            if len(buckets) == 2 and not buckets & used:
                kept.append(pair)
                used.update(buckets)
        return kept

    relations, hops = fit(RELATIONS), fit(HOPS)
    if not relations or not hops:
        raise SynthError(f"embed_dim={embedder.dim} leaves no collision-free template words")
    return relations, hops, used


def generate_instances(spec: SynthSpec) -> SynthResult:
    spec.validate()
    n, n_dist = spec.num_queries, spec.distractors_per_query
    rng = random.Random(spec.seed)
    embedder = HashingEmbedder(dim=spec.embed_dim)
    relations, hops, template_buckets = _pick_templates(embedder)

    words = vocabulary(spec.vocab_size)
    rng.shuffle(words)
    by_bucket: dict[int, list[str]] = {}
    for w in words:
        b = embedder.bucket(w)
        if b not in template_buckets:
            by_bucket.setdefault(b, []).append(w)

    free = [b for b in range(spec.embed_dim) if b in by_bucket]
    rng.shuffle(free)
    if len(free) < 2 * n + 1:
        raise SynthError(
            f"need {2 * n} exclusive hash buckets for heads and bridges plus one shared bucket, "
            f"but only {len(free)} non-template buckets hold vocabulary words "
            f"(embed_dim={spec.embed_dim}, vocab_size={spec.vocab_size})"
        )
    exclusive, shared = free[:2 * n], sorted(free[2 * n:])
    heads = [by_bucket[b][0] for b in exclusive[:n]]
    bridges = [by_bucket[b][0] for b in exclusive[n:]]

    shared_words = [w for w in words if embedder.bucket(w) in set(shared)]
    need = n * (1 + 2 * n_dist)
    if len(shared_words) < need:
        raise SynthError(
            f"vocab_size={spec.vocab_size} too small: need {need} distinct answer/distractor "
            f"words in shared buckets, found {len(shared_words)}"
        )
    fresh = iter(shared_words)

    width = max(4, len(str(n - 1)))
    instances = []
    for i in range(n):
        qid = f"q{i:0{width}d}"
        rel, rel_doc = relations[rng.randrange(len(relations))]
        hop, hop_doc = hops[rng.randrange(len(hops))]
        head, bridge, answer = heads[i].capitalize(), bridges[i].capitalize(), next(fresh).capitalize()
        static = Document(f"hop1-{qid}", f"{head} {hop_doc} {bridge}.", title=head)
        dynamic = Document(f"hop2-{qid}", f"{bridge} {rel_doc} {answer}.", title=bridge)
        distractors = []
        for j in range(n_dist):
            x, y = next(fresh).capitalize(), next(fresh).capitalize()
            distractors.append(Document(f"decoy-{qid}-{j}", f"{x} {rel} {y}.", title=x))
        query = QueryRecord(
            query_id=qid,
            text=f"Who is the {rel} of the {hop} of {head}?",
            gold_answers=(answer,),
            gold_doc_ids=(static.doc_id, dynamic.doc_id),
            candidates=tuple(d.doc_id for d in [static, *distractors, dynamic]),
        )
        instances.append(SynthInstance(query, static, dynamic, distractors, head, bridge,
                                       answer, (rel, rel_doc), (hop, hop_doc)))
    result = SynthResult(instances, embedder, relations, hops)
    check_disjointness(result)
    check_bucket_exclusivity(result)
    return result


def check_disjointness(result: SynthResult) -> None:
    """Token-level structure of every instance; raises SynthError on violation."""
    for inst in result.instances:
        q = set(tokenize(inst.query.text))
        stat = set(tokenize(inst.static.content))
        dyn = set(tokenize(inst.dynamic.content))
        bridge = inst.bridge.lower()
        if dyn & q:
            raise SynthError(f"{inst.query.query_id}: dynamic doc shares {sorted(dyn & q)} with query")
        if bridge not in (dyn & stat):
            raise SynthError(f"{inst.query.query_id}: bridge {bridge!r} not shared by static/dynamic")
        if inst.head.lower() not in stat & q:
            raise SynthError(f"{inst.query.query_id}: head not shared by query and static doc")
        for d in inst.distractors:
            toks = set(tokenize(d.content))
            if bridge in toks or inst.relation[0] not in toks:
                raise SynthError(f"{inst.query.query_id}: distractor {d.doc_id} violates its pattern")
        if inst.answer.lower() in set().union(*(set(tokenize(d.content)) for d in inst.distractors), stat, q):
            raise SynthError(f"{inst.query.query_id}: answer token is not unique to the dynamic doc")


def check_bucket_exclusivity(result: SynthResult) -> None:
    """Head and bridge buckets of a query are touched only by that query's own documents."""
    owner: dict[int, str] = {}
    emb = result.embedder
    for inst in result.instances:
        for tok in (inst.head.lower(), inst.bridge.lower()):
            owner[emb.bucket(tok)] = inst.query.query_id
    for inst in result.instances:
        qid = inst.query.query_id
        for doc in inst.documents:
            for tok in tokenize(doc.content):
                b = emb.bucket(tok)
                if b in owner and owner[b] != qid:
                    raise SynthError(f"token {tok!r} of {doc.doc_id} lands in a bucket owned by {owner[b]}")


def check_separation(result: SynthResult) -> None:
    """With the reference embedder, the static doc is the unique best match for
    its query and the dynamic doc the unique best non-static match for the
    concatenated query."""
    docs = result.documents
    ids = [d.doc_id for d in docs]
    matrix = result.embedder.transform([d.content for d in docs])
    for inst in result.instances:
        for text, target, skip in (
            (inst.query.text, inst.static.doc_id, None),
            (concat_query(inst.query.text, inst.static), inst.dynamic.doc_id, inst.static.doc_id),
        ):
            scores = matrix @ result.embedder.embed(text).values
            best = scores[ids.index(target)]
            others = [s for d, s in zip(ids, scores) if d not in (target, skip)]
            if others and not best > max(others) + 1e-12:
                raise SynthError(f"{inst.query.query_id}: {target} is not strictly separated")


def generate(spec: SynthSpec) -> tuple[list[Document], list[QueryRecord]]:
    result = generate_instances(spec)
    check_separation(result)
    return result.documents, result.queries


def write_synth(spec: SynthSpec, corpus_path, dataset_path) -> tuple[list[Document], list[QueryRecord]]:
    docs, queries = generate(spec)
    write_corpus(docs, corpus_path)
    write_dataset(queries, dataset_path)
    return docs, queries


__all__ = [
    "SynthSpec", "SynthError", "SynthInstance", "SynthResult", "generate", "generate_instances",
    "check_disjointness", "check_bucket_exclusivity", "check_separation", "vocabulary", "write_synth",
]
