"""Decision trees: extraction from solved policies, evaluation, CART baseline, file format."""

from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction
from urllib.parse import quote, unquote

import numpy as np

from dtrl.errors import (
    ExtractionError,
    MalformedTreeError,
    NotRepresentableError,
    TreeParseError,
)
from dtrl.ibmdp import TabularPolicy, low_mask, split_threshold

TREE_FORMAT = "dtrl-tree v1"


@dataclass(frozen=True)
class Leaf:
    cls: int


@dataclass(frozen=True)
class DecisionNode:
    feature: int
    threshold: Fraction  # normalized units; x <= threshold goes low
    real_threshold: float  # raw units, for display
    low: int
    high: int


@dataclass
class DecisionTree:
    """Arena of nodes; ``root`` indexes into ``nodes``."""

    nodes: list = field(default_factory=list)
    root: int = 0
    class_names: tuple[str, ...] = ()
    feature_names: tuple[str, ...] = ()
    metadata: dict = field(default_factory=dict)

    @classmethod
    def empty(cls, class_names, feature_names, metadata=None) -> DecisionTree:
        return cls([], 0, tuple(class_names), tuple(feature_names), dict(metadata or {}))

    @classmethod
    def single_leaf(cls, class_index, class_names, feature_names, metadata=None) -> DecisionTree:
        tree = cls.empty(class_names, feature_names, metadata)
        tree.root = tree.add_leaf(class_index)
        return tree

    def add_leaf(self, cls_index: int) -> int:
        self.nodes.append(Leaf(int(cls_index)))
        return len(self.nodes) - 1

    def add_split(self, feature: int, threshold, real_threshold: float, low: int, high: int) -> int:
        self.nodes.append(DecisionNode(int(feature), Fraction(threshold), float(real_threshold), int(low), int(high)))
        return len(self.nodes) - 1

    # structure ------------------------------------------------------------

    def _walk(self):
        """Yield ``(node_id, depth, lower, upper)`` in depth-first order from the root."""
        d = len(self.feature_names)
        stack = [(self.root, 0, (Fraction(0),) * d, (Fraction(1),) * d)]
        while stack:
            nid, depth, lower, upper = stack.pop()
            yield nid, depth, lower, upper
            node = self.nodes[nid]
            if isinstance(node, DecisionNode):
                k, t = node.feature, node.threshold
                stack.append((node.high, depth + 1, lower[:k] + (t,) + lower[k + 1 :], upper))
                stack.append((node.low, depth + 1, lower, upper[:k] + (t,) + upper[k + 1 :]))

    def validate(self) -> None:
        """Check acyclicity, child references, class/feature ranges and threshold consistency."""
        n = len(self.nodes)
        if not 0 <= self.root < n:
            raise MalformedTreeError(f"root {self.root} out of range")
        seen = set()
        # acyclic + every node reached at most once (a tree, not a DAG)
        stack = [self.root]
        while stack:
            nid = stack.pop()
            if nid in seen:
                raise MalformedTreeError(f"node {nid} reached twice: not a tree")
            seen.add(nid)
            node = self.nodes[nid]
            if isinstance(node, DecisionNode):
                for c in (node.low, node.high):
                    if not 0 <= c < n:
                        raise MalformedTreeError(f"node {nid} references missing child {c}")
                    stack.append(c)
        d, K = len(self.feature_names), len(self.class_names)
        for nid, _, lower, upper in self._walk():
            node = self.nodes[nid]
            if isinstance(node, Leaf):
                if not 0 <= node.cls < K:
                    raise MalformedTreeError(f"leaf {nid} has class {node.cls} outside 0..{K - 1}")
                continue
            if not 0 <= node.feature < d:
                raise MalformedTreeError(f"node {nid} uses feature {node.feature} outside 0..{d - 1}")
            if not lower[node.feature] < node.threshold < upper[node.feature]:
                raise MalformedTreeError(
                    f"node {nid} threshold {node.threshold} not inside ({lower[node.feature]}, {upper[node.feature]})"
                )

    def reachable(self) -> list[int]:
        return [nid for nid, *_ in self._walk()]

    @property
    def decision_node_count(self) -> int:
        return sum(isinstance(self.nodes[i], DecisionNode) for i in self.reachable())

    @property
    def leaf_count(self) -> int:
        return sum(isinstance(self.nodes[i], Leaf) for i in self.reachable())

    @property
    def depth(self) -> int:
        return max(depth for _, depth, *_ in self._walk())

    # prediction -------------------------------------------------------------

    def predict(self, samples: np.ndarray) -> np.ndarray:
        samples = np.asarray(samples, dtype=float)
        d = len(self.feature_names)
        if samples.ndim != 2 or samples.shape[1] != d:
            raise MalformedTreeError(f"tree expects {d} features, data has shape {samples.shape}")
        out = np.empty(len(samples), dtype=np.int64)
        stack = [(self.root, np.arange(len(samples)))]
        while stack:
            nid, idx = stack.pop()
            node = self.nodes[nid]
            if isinstance(node, Leaf):
                out[idx] = node.cls
                continue
            if not 0 <= node.feature < d:
                raise MalformedTreeError(f"node {nid} uses feature {node.feature} outside 0..{d - 1}")
            m = low_mask(samples[idx, node.feature], node.threshold)
            stack.append((node.low, idx[m]))
            stack.append((node.high, idx[~m]))
        return out

    def structurally_equal(self, other: DecisionTree) -> bool:
        def canon(tree, nid):
            node = tree.nodes[nid]
            if isinstance(node, Leaf):
                return ("leaf", node.cls)
            return ("split", node.feature, node.threshold, canon(tree, node.low), canon(tree, node.high))

        return (
            canon(self, self.root) == canon(other, other.root)
            and self.class_names == other.class_names
            and self.feature_names == other.feature_names
        )

    def pretty(self, real: bool = True) -> str:
        lines = []

        def rec(nid, indent):
            node = self.nodes[nid]
            pad = "    " * indent
            if isinstance(node, Leaf):
                lines.append(f"{pad}return {self.class_names[node.cls]}")
                return
            name = self.feature_names[node.feature]
            t = f"{node.real_threshold:.6g}" if real else str(node.threshold)
            lines.append(f"{pad}if {name} <= {t}:")
            rec(node.low, indent + 1)
            lines.append(f"{pad}else:")
            rec(node.high, indent + 1)

        rec(self.root, 0)
        return "\n".join(lines)


@dataclass(frozen=True)
class TreeMetrics:
    accuracy: float
    decision_node_count: int
    leaf_count: int
    depth: int
    J: float | None = None


def evaluate_tree(tree: DecisionTree, dataset) -> TreeMetrics:
    pred = tree.predict(dataset.samples)
    accuracy = float(np.mean(pred == dataset.labels))
    return TreeMetrics(accuracy, tree.decision_node_count, tree.leaf_count, tree.depth)


def majority_class(counts) -> int:
    """Most frequent class, lowest index on ties."""
    return int(np.argmax(counts))


# --- policies <-> trees ------------------------------------------------------


def extract_tree(model, policy, metadata=None) -> DecisionTree:
    """Read the tree encoded by a (mode of a) reactive policy, from the root observation down."""
    probs = policy.probs if isinstance(policy, TabularPolicy) else policy.policy.probs
    actions = np.argmax(probs, axis=1)
    ds = model.instance.dataset
    K, p = model.n_classes, model.p
    tree = DecisionTree.empty(ds.class_names, ds.feature_names, metadata)

    def build(o, path):
        if o in path:
            raise ExtractionError(f"policy repeats IGAs indefinitely: observation {o} ({model.bounds(o)}) revisited")
        a = int(actions[o])
        if a < K:
            return tree.add_leaf(a)
        if not model.mask[o, a]:
            raise ExtractionError(f"policy takes a masked split at observation {o}")
        j = a - K
        k, u = j // p, j % p + 1
        t = split_threshold(model.bounds(o), k, u, p)
        path = path | {o}
        kids = []
        for child in (model.child_low[o, j], model.child_high[o, j]):
            if child < 0:
                kids.append(tree.add_leaf(majority_class(model.counts[o])))
            else:
                kids.append(build(int(child), path))
        return tree.add_split(k, t, float(ds.denormalize(float(t), k)), kids[0], kids[1])

    tree.root = build(0, frozenset())
    return tree


def tree_to_policy(tree: DecisionTree, model) -> TabularPolicy:
    """Deterministic policy acting like ``tree``; boxes the tree never reaches predict the majority class."""
    K, p = model.n_classes, model.p
    d = model.obs.n_features
    if len(tree.feature_names) != d or len(tree.class_names) != K:
        raise MalformedTreeError("tree and model disagree on features or classes")
    actions = np.argmax(model.counts, axis=1)
    stack = [(tree.root, 0)]
    while stack:
        nid, o = stack.pop()
        node = tree.nodes[nid]
        if isinstance(node, Leaf):
            if not 0 <= node.cls < K:
                raise MalformedTreeError(f"leaf {nid} has class {node.cls}")
            actions[o] = node.cls
            continue
        if not 0 <= node.feature < d:
            raise MalformedTreeError(f"node {nid} uses feature {node.feature}")
        if not model.mask[o, K]:
            raise NotRepresentableError(f"node {nid} is deeper than the model's depth cap {model.max_igas}")
        b = model.bounds(o)
        k = node.feature
        frac = (node.threshold - b.lower[k]) / b.width(k) * (p + 1)
        if frac.denominator != 1 or not 1 <= frac.numerator <= p:
            raise NotRepresentableError(f"node {nid} threshold {node.threshold} is off the split grid of {b}")
        j = k * p + frac.numerator - 1
        actions[o] = K + j
        for child_node, child_obs in ((node.low, model.child_low[o, j]), (node.high, model.child_high[o, j])):
            if child_obs >= 0:  # empty boxes are never visited
                stack.append((child_node, int(child_obs)))
    return TabularPolicy.deterministic(actions, model.n_actions)


def tree_return(tree: DecisionTree, model) -> float:
    from dtrl.oibmdp import policy_return

    return policy_return(model, tree_to_policy(tree, model))[0]


# --- CART baseline -----------------------------------------------------------


def _best_gini_split(x: np.ndarray, y: np.ndarray, n_classes: int):
    """Lowest weighted-Gini ``(score, feature, threshold)`` over midpoints; ties -> lowest feature, threshold."""
    n = len(y)
    best = None
    onehot = np.eye(n_classes, dtype=np.int64)[y]
    for k in range(x.shape[1]):
        order = np.argsort(x[:, k], kind="stable")
        xs = x[order, k]
        cum = np.cumsum(onehot[order], axis=0)
        # candidate cut after position i (0-based) where xs[i] < xs[i+1]
        cut = np.flatnonzero(xs[:-1] < xs[1:])
        if len(cut) == 0:
            continue
        left = cum[cut]
        right = cum[-1] - left
        nl = (cut + 1).astype(float)
        nr = n - nl
        gini_l = 1.0 - np.sum((left / nl[:, None]) ** 2, axis=1)
        gini_r = 1.0 - np.sum((right / nr[:, None]) ** 2, axis=1)
        score = (nl * gini_l + nr * gini_r) / n
        i = int(np.argmin(score))
        a, b = xs[cut[i]], xs[cut[i] + 1]
        t = (a + b) / 2.0
        if not a <= t < b:
            t = a
        if best is None or score[i] < best[0] - 1e-15:
            best = (float(score[i]), k, float(t))
    return best


def greedy_cart(dataset, max_depth: int, metadata=None) -> DecisionTree:
    """Top-down Gini induction with midpoint thresholds.

    Impure nodes with depth budget left are split even when no candidate
    lowers the impurity, so XOR-like data can still be separated.
    """
    if max_depth < 1:
        raise ValueError("max_depth must be >= 1")
    x, y, K = dataset.samples, dataset.labels, dataset.n_classes
    tree = DecisionTree.empty(dataset.class_names, dataset.feature_names, metadata)

    def build(idx, depth):
        counts = np.bincount(y[idx], minlength=K)
        if depth >= max_depth or np.count_nonzero(counts) <= 1:
            return tree.add_leaf(majority_class(counts))
        best = _best_gini_split(x[idx], y[idx], K)
        if best is None:
            return tree.add_leaf(majority_class(counts))
        _, k, t = best
        frac = Fraction(t)
        m = low_mask(x[idx, k], frac)
        low = build(idx[m], depth + 1)
        high = build(idx[~m], depth + 1)
        return tree.add_split(k, frac, float(dataset.denormalize(t, k)), low, high)

    tree.root = build(np.arange(len(y)), 0)
    return tree


# --- file format ---------------------------------------------------------------


def serialize_tree(tree: DecisionTree) -> str:
    """Text form::

        # dtrl-tree v1
        meta <key> <value>
        class <index> <name>
        feature <index> <name>
        root <id>
        split <id> feature=<k> threshold=<num>/<den> real=<float> low=<id> high=<id>
        leaf <id> class=<h>

    Names, keys and values are percent-encoded so they contain no whitespace.
    """
    out = [f"# {TREE_FORMAT}"]
    for key, value in tree.metadata.items():
        out.append(f"meta {quote(str(key), safe='')} {quote(str(value), safe='')}".rstrip())
    for i, name in enumerate(tree.class_names):
        out.append(f"class {i} {quote(name, safe='')}")
    for i, name in enumerate(tree.feature_names):
        out.append(f"feature {i} {quote(name, safe='')}")
    out.append(f"root {tree.root}")
    for nid, node in enumerate(tree.nodes):
        if isinstance(node, Leaf):
            out.append(f"leaf {nid} class={node.cls}")
        else:
            t = node.threshold
            out.append(
                f"split {nid} feature={node.feature} threshold={t.numerator}/{t.denominator} "
                f"real={node.real_threshold!r} low={node.low} high={node.high}"
            )
    return "\n".join(out) + "\n"


def _parse_int(text, line, field_name):
    try:
        return int(text)
    except ValueError:
        raise TreeParseError(f"expected an integer, got {text!r}", line, field_name) from None


def deserialize_tree(text: str) -> DecisionTree:
    lines = text.splitlines()
    if not lines or lines[0].strip() != f"# {TREE_FORMAT}":
        raise TreeParseError(f"missing header '# {TREE_FORMAT}'", 1)
    metadata, classes, features, nodes = {}, {}, {}, {}
    root = None
    for lineno, raw in enumerate(lines[1:], start=2):
        parts = raw.split()
        if not parts or parts[0].startswith("#"):
            continue
        kind = parts[0]
        if kind == "meta":
            if len(parts) not in (2, 3):
                raise TreeParseError("meta needs a key and an optional value", lineno)
            metadata[unquote(parts[1])] = unquote(parts[2]) if len(parts) == 3 else ""
        elif kind in ("class", "feature"):
            if len(parts) != 3:
                raise TreeParseError(f"{kind} needs an index and a name", lineno)
            target = classes if kind == "class" else features
            target[_parse_int(parts[1], lineno, "index")] = unquote(parts[2])
        elif kind == "root":
            if len(parts) != 2:
                raise TreeParseError("root needs one id", lineno)
            root = _parse_int(parts[1], lineno, "root")
        elif kind in ("split", "leaf"):
            if len(parts) < 2:
                raise TreeParseError(f"{kind} needs an id", lineno)
            nid = _parse_int(parts[1], lineno, "id")
            if nid in nodes:
                raise TreeParseError(f"duplicate node id {nid}", lineno, "id")
            fields = {}
            for tok in parts[2:]:
                if "=" not in tok:
                    raise TreeParseError(f"expected key=value, got {tok!r}", lineno)
                k, v = tok.split("=", 1)
                fields[k] = v
            if kind == "leaf":
                if "class" not in fields:
                    raise TreeParseError("leaf without class", lineno, "class")
                nodes[nid] = (Leaf(_parse_int(fields["class"], lineno, "class")), lineno)
            else:
                for req in ("feature", "threshold", "real", "low", "high"):
                    if req not in fields:
                        raise TreeParseError("missing field", lineno, req)
                try:
                    num, den = fields["threshold"].split("/")
                    threshold = Fraction(int(num), int(den))
                except (ValueError, ZeroDivisionError):
                    raise TreeParseError(f"bad rational {fields['threshold']!r}", lineno, "threshold") from None
                try:
                    real = float(fields["real"])
                except ValueError:
                    raise TreeParseError(f"bad real {fields['real']!r}", lineno, "real") from None
                node = DecisionNode(
                    _parse_int(fields["feature"], lineno, "feature"),
                    threshold,
                    real,
                    _parse_int(fields["low"], lineno, "low"),
                    _parse_int(fields["high"], lineno, "high"),
                )
                nodes[nid] = (node, lineno)
        else:
            raise TreeParseError(f"unknown record {kind!r}", lineno)
    if root is None:
        raise TreeParseError("no root record")
    if sorted(nodes) != list(range(len(nodes))):
        raise TreeParseError("node ids must be 0..n-1")
    for name, table in (("class", classes), ("feature", features)):
        if sorted(table) != list(range(len(table))):
            raise TreeParseError(f"{name} indices must be 0..n-1")
    if root not in nodes:
        raise TreeParseError(f"root {root} is not a node")
    # cycles / shared children
    for nid, (node, lineno) in nodes.items():
        if isinstance(node, DecisionNode):
            for side, c in (("low", node.low), ("high", node.high)):
                if c not in nodes:
                    raise TreeParseError(f"reference to missing node {c}", lineno, side)
    seen = set()
    stack = [root]
    while stack:
        nid = stack.pop()
        node, lineno = nodes[nid]
        if nid in seen:
            raise TreeParseError(f"node {nid} reached twice (cycle or shared child)", lineno)
        seen.add(nid)
        if isinstance(node, DecisionNode):
            stack.extend((node.low, node.high))
    tree = DecisionTree(
        nodes=[nodes[i][0] for i in range(len(nodes))],
        root=root,
        class_names=tuple(classes[i] for i in range(len(classes))),
        feature_names=tuple(features[i] for i in range(len(features))),
        metadata=metadata,
    )
    try:
        tree.validate()
    except MalformedTreeError as exc:
        raise TreeParseError(str(exc)) from None
    return tree


def save_tree(tree: DecisionTree, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(serialize_tree(tree))


def load_tree(path) -> DecisionTree:
    with open(path, encoding="utf-8") as fh:
        return deserialize_tree(fh.read())
