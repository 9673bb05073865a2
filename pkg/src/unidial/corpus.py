"""Comment dumps -> message trees -> (context, response) samples with role ids.

Every non-root node of a thread tree yields one sample: the comments on the
path from the root down to its parent form the context and the node itself
is the response.  Speakers are mapped to role ids relative to the responder,
who is always role 0.
"""

from __future__ import annotations

import json
import logging
import re
import unicodedata
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from typing import Iterable, Iterator, Optional

logger = logging.getLogger(__name__)

DEFAULT_ROLE_CAP = 8


@dataclass(frozen=True)
class CommentNode:
    comment_id: str
    parent_id: Optional[str]
    user_id: str
    text: str
    timestamp: Optional[int] = None

    def sort_key(self):
        return (self.timestamp if self.timestamp is not None else 0, self.comment_id)

    @classmethod
    def from_json(cls, obj: dict) -> "CommentNode":
        parent = obj.get("parent_id")
        ts = obj.get("ts")
        return cls(
            comment_id=str(obj["id"]),
            parent_id=None if parent in (None, "") else str(parent),
            user_id=str(obj["user_id"]),
            text=str(obj["text"]),
            timestamp=None if ts is None else int(ts),
        )


@dataclass
class MessageTree:
    root: CommentNode
    children: dict[str, list[CommentNode]] = field(default_factory=dict)

    def kids(self, node: CommentNode) -> list[CommentNode]:
        return self.children.get(node.comment_id, [])

    def preorder(self) -> Iterator[tuple[CommentNode, tuple[CommentNode, ...]]]:
        """Yield (node, ancestors) pairs, ancestors ordered root first."""
        stack = [(self.root, ())]
        while stack:
            node, path = stack.pop()
            yield node, path
            below = path + (node,)
            for child in reversed(self.kids(node)):
                stack.append((child, below))

    def nodes(self) -> list[CommentNode]:
        return [n for n, _ in self.preorder()]

    def __len__(self):
        return sum(1 for _ in self.preorder())

    def depth(self) -> int:
        return max(len(path) for _, path in self.preorder())


@dataclass
class BuildStats:
    records: int = 0
    duplicates: int = 0
    orphans: int = 0
    orphan_nodes_dropped: int = 0
    cycles_broken: int = 0

    def as_dict(self):
        return dict(self.__dict__)


@dataclass
class DialogueSample:
    context: list[tuple[str, str]]
    response: tuple[str, str]
    role_ids: list[int] = field(default_factory=list)

    def to_json(self) -> dict:
        return {
            "context": [{"text": t, "user": u} for t, u in self.context],
            "response": {"text": self.response[0], "user": self.response[1]},
            "roles": list(self.role_ids),
        }

    @classmethod
    def from_json(cls, obj: dict) -> "DialogueSample":
        return cls(
            context=[(c["text"], c["user"]) for c in obj["context"]],
            response=(obj["response"]["text"], obj["response"]["user"]),
            role_ids=list(obj.get("roles", [])),
        )


def _canonical(node: CommentNode):
    # Winner among duplicate ids must not depend on arrival order.
    return (*node.sort_key(), node.user_id, node.text, node.parent_id or "")


def build_trees(records: Iterable[CommentNode], stats: Optional[BuildStats] = None) -> list[MessageTree]:
    """Assemble message trees from comment records arriving in any order.

    Duplicate ids keep one canonical record.  Subtrees hanging off a missing
    parent are dropped.  A parent cycle is broken by detaching its earliest
    member, which then becomes a root.
    """
    stats = stats if stats is not None else BuildStats()
    by_id: dict[str, CommentNode] = {}
    for rec in records:
        stats.records += 1
        prev = by_id.get(rec.comment_id)
        if prev is None:
            by_id[rec.comment_id] = rec
            continue
        stats.duplicates += 1
        if _canonical(rec) < _canonical(prev):
            by_id[rec.comment_id] = rec

    # Walk parent chains to classify every node: rooted, orphaned, or on a cycle.
    parent = {cid: n.parent_id for cid, n in by_id.items()}
    state: dict[str, str] = {}
    for start in sorted(by_id):
        path = []
        on_path = set()
        cur = start
        while True:
            if cur in state:
                verdict = state[cur]
                break
            if cur not in by_id:
                verdict = "orphan"
                stats.orphans += 1
                break
            if cur in on_path:
                cycle = path[path.index(cur):]
                head = min(cycle, key=lambda c: by_id[c].sort_key())
                logger.warning("breaking parent cycle through %s at %s", cycle, head)
                parent[head] = None
                stats.cycles_broken += 1
                for c in cycle:
                    state[c] = "root"
                path = path[: path.index(cur)]
                verdict = "root"
                break
            pid = parent[cur]
            if pid is None:
                state[cur] = "root"
                verdict = "root"
                break
            path.append(cur)
            on_path.add(cur)
            cur = pid
        for c in path:
            state[c] = verdict
            if verdict == "orphan":
                stats.orphan_nodes_dropped += 1

    children: dict[str, list[CommentNode]] = defaultdict(list)
    roots = []
    for cid, node in by_id.items():
        if state[cid] != "root":
            continue
        pid = parent[cid]
        if pid is None:
            if node.parent_id is not None:
                node = CommentNode(node.comment_id, None, node.user_id, node.text, node.timestamp)
            roots.append(node)
        else:
            children[pid].append(node)

    trees = []
    for root in sorted(roots, key=CommentNode.sort_key):
        tree = MessageTree(root=root)
        for node, _ in _walk(root, children):
            kids = children.get(node.comment_id)
            if kids:
                tree.children[node.comment_id] = sorted(kids, key=CommentNode.sort_key)
        trees.append(tree)
    return trees


def _walk(root, children):
    stack = [(root, 0)]
    while stack:
        node, d = stack.pop()
        yield node, d
        for child in children.get(node.comment_id, ()):
            stack.append((child, d + 1))


def assign_roles(sample: DialogueSample, role_cap: int = DEFAULT_ROLE_CAP) -> DialogueSample:
    """Fill role ids: responder -> 0, other users -> 1, 2, ... by first appearance.

    Ids beyond ``role_cap`` share the overflow bucket ``role_cap``.
    """
    responder = sample.response[1]
    seen: dict[str, int] = {responder: 0}
    roles = []
    for _, user in sample.context:
        if user not in seen:
            seen[user] = len(seen)
        roles.append(min(seen[user], role_cap))
    roles.append(0)
    return DialogueSample(list(sample.context), sample.response, roles)


def extract_samples(tree: MessageTree, role_cap: int = DEFAULT_ROLE_CAP) -> list[DialogueSample]:
    out = []
    for node, path in tree.preorder():
        if not path:
            continue
        sample = DialogueSample(
            context=[(a.text, a.user_id) for a in path],
            response=(node.text, node.user_id),
        )
        out.append(assign_roles(sample, role_cap))
    return out


URL_RE = re.compile(r"(?:https?://|www\.)\S+", re.IGNORECASE)


@dataclass
class CleaningConfig:
    """Filters applied to every sample; each one can be switched off.

    Lengths are counted in whitespace-separated words.
    """

    min_len: Optional[int] = 2
    max_turn_len: Optional[int] = 256
    strip_urls: bool = True
    blocklist: frozenset = frozenset()
    max_non_text_ratio: Optional[float] = 0.5

    @staticmethod
    def load_blocklist(path) -> frozenset:
        with open(path, encoding="utf-8") as fh:
            return frozenset(w.strip().lower() for w in fh if w.strip() and not w.startswith("#"))


def _non_text_ratio(text: str) -> float:
    chars = [c for c in text if not c.isspace()]
    if not chars:
        return 1.0
    bad = sum(1 for c in chars if unicodedata.category(c)[0] not in "LNP")
    return bad / len(chars)


def clean(sample: DialogueSample, rules: CleaningConfig, counts: Optional[Counter] = None) -> Optional[DialogueSample]:
    """Return the (possibly URL-stripped) sample, or None with the reason counted."""

    def reject(reason):
        if counts is not None:
            counts[reason] += 1
        return None

    turns = list(sample.context) + [sample.response]
    if rules.strip_urls:
        turns = [(" ".join(URL_RE.sub(" ", t).split()), u) if URL_RE.search(t) else (t, u) for t, u in turns]
    if any(not t.strip() for t, _ in turns):
        return reject("empty")
    if rules.min_len is not None and len(turns[-1][0].split()) < rules.min_len:
        return reject("min_len")
    if rules.max_turn_len is not None and any(len(t.split()) > rules.max_turn_len for t, _ in turns):
        return reject("max_len")
    if rules.blocklist:
        for t, _ in turns:
            if any(w.lower().strip(".,!?;:\"'()") in rules.blocklist for w in t.split()):
                return reject("blocklist")
    if rules.max_non_text_ratio is not None and any(
        _non_text_ratio(t) > rules.max_non_text_ratio for t, _ in turns
    ):
        return reject("non_text")
    return DialogueSample(turns[:-1], turns[-1], list(sample.role_ids))


def read_comments(path) -> Iterator[CommentNode]:
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                yield CommentNode.from_json(json.loads(line))
            except (KeyError, ValueError) as exc:
                logger.warning("%s:%d: skipping malformed record (%s)", path, lineno, exc)


def read_samples(path) -> list[DialogueSample]:
    with open(path, encoding="utf-8") as fh:
        return [DialogueSample.from_json(json.loads(line)) for line in fh if line.strip()]


def write_samples(samples: Iterable[DialogueSample], path) -> int:
    n = 0
    with open(path, "w", encoding="utf-8") as fh:
        for s in samples:
            fh.write(json.dumps(s.to_json(), ensure_ascii=False) + "\n")
            n += 1
    return n


def build_corpus(records: Iterable[CommentNode], rules: Optional[CleaningConfig] = None,
                 role_cap: int = DEFAULT_ROLE_CAP):
    """Trees, samples and cleaning in one pass; returns (samples, stats dict)."""
    stats = BuildStats()
    trees = build_trees(records, stats)
    rejected: Counter = Counter()
    samples = []
    total = 0
    for tree in trees:
        for s in extract_samples(tree, role_cap):
            total += 1
            if rules is not None:
                s = clean(s, rules, rejected)
            if s is not None:
                samples.append(s)
    report = stats.as_dict()
    report.update(trees=len(trees), samples_extracted=total, samples_kept=len(samples),
                  rejected=dict(sorted(rejected.items())))
    return samples, report
