"""File formats: headerless float CSV, labels CSV, tree JSON, Newick, traces.

All writers are deterministic: floats go through ``repr`` (shortest
round-trip form) and JSON keys keep construction order, so fixed-seed runs
produce byte-identical artifacts.
"""

from __future__ import annotations

import json
from importlib import resources
from pathlib import Path

import numpy as np

from .errors import DataError
from .model import Tree


def _fmt(v: float) -> str:
    return repr(float(v))


# -- data / labels CSV -----------------------------------------------------


def load_data_csv(path) -> np.ndarray:
    """Headerless CSV of floats, one row per datum.

    Ragged rows and unparseable or non-finite fields are reported with their
    line number.
    """
    rows = []
    width = None
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            fields = line.split(",")
            if width is None:
                width = len(fields)
            elif len(fields) != width:
                raise DataError(
                    f"{path}: row {lineno} has {len(fields)} fields, expected {width}"
                )
            try:
                row = [float(f) for f in fields]
            except ValueError as exc:
                raise DataError(f"{path}: row {lineno} has a non-numeric field") from exc
            if not all(np.isfinite(row)):
                raise DataError(f"{path}: row {lineno} contains a non-finite value")
            rows.append(row)
    if not rows:
        raise DataError(f"{path}: no data rows")
    return np.asarray(rows, dtype=float)


def save_data_csv(path, x: np.ndarray) -> None:
    x = np.atleast_2d(np.asarray(x, float))
    with open(path, "w", encoding="utf-8") as fh:
        for row in x:
            fh.write(",".join(_fmt(v) for v in row) + "\n")


def load_labels_csv(path, n: int | None = None) -> list[str]:
    """Labels CSV of (key, class) rows.

    Integer keys are datum indices; otherwise row order indexes the data.
    Returns a dense list; missing indices raise.
    """
    pairs = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            parts = line.split(",")
            if len(parts) != 2:
                raise DataError(f"{path}: row {lineno} needs exactly two fields")
            pairs.append((parts[0].strip(), parts[1].strip()))
    if not pairs:
        raise DataError(f"{path}: no label rows")
    keys = [p[0] for p in pairs]
    if all(_is_int(k) for k in keys):
        size = n if n is not None else max(int(k) for k in keys) + 1
        out: list[str | None] = [None] * size
        for k, lab in pairs:
            idx = int(k)
            if idx < 0 or idx >= size:
                raise DataError(f"{path}: label index {idx} out of range 0..{size - 1}")
            out[idx] = lab
        missing = [i for i, v in enumerate(out) if v is None]
        if missing:
            raise DataError(f"{path}: labels missing for indices {missing[:10]}")
        return out  # type: ignore[return-value]
    labels = [lab for _, lab in pairs]
    if n is not None and len(labels) != n:
        raise DataError(f"{path}: {len(labels)} labels for {n} data rows")
    return labels


def save_labels_csv(path, labels) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for i, lab in enumerate(labels):
            fh.write(f"{i},{lab}\n")


def _is_int(s: str) -> bool:
    try:
        int(s)
        return True
    except ValueError:
        return False


def animals_labels_path() -> Path:
    """Path of the bundled animals reference label table (33 rows)."""
    return Path(str(resources.files("hiermix").joinpath("data/animals_labels.csv")))


# -- tree JSON ---------------------------------------------------------------


def tree_to_dict(tree: Tree, paths=None) -> dict:
    """JSON-ready description: parent links, weights, margins, members.

    ``paths`` (per-datum node tuples) fills the member lists; omit it for
    structure-only export.
    """
    members: dict[int, list[int]] = {z: [] for z in tree.children}
    if paths is not None:
        for n, path in enumerate(paths):
            for z in path:
                members[z].append(n)
    nodes = []
    for z in sorted(tree.children.keys()):
        nodes.append(
            {
                "id": int(z),
                "parent": None if z == Tree.ROOT else int(tree.parent[z]),
                "level": int(tree.level[z]),
                "children": [int(c) for c in tree.children[z]],
                "beta": [float(v) for v in tree.weights[z]],
                "eta": [float(v) for v in tree.margins[z]],
                "members": members[z],
            }
        )
    return {"nodes": nodes}


def save_tree_json(path, tree: Tree, paths=None) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(tree_to_dict(tree, paths), fh, indent=2)
        fh.write("\n")


def load_tree_json(path) -> tuple[Tree, list[tuple[int, ...]]]:
    """Rebuild a tree and the per-datum paths from the JSON export."""
    with open(path, encoding="utf-8") as fh:
        payload = json.load(fh)
    nodes = payload.get("nodes")
    if not nodes:
        raise DataError(f"{path}: no nodes in tree file")
    by_id = {node["id"]: node for node in nodes}
    roots = [node for node in nodes if node["parent"] is None]
    if len(roots) != 1:
        raise DataError(f"{path}: expected exactly one root, found {len(roots)}")
    root = roots[0]

    tree = Tree.__new__(Tree)
    tree.parent = {}
    tree.children = {}
    tree.weights = {}
    tree.margins = {}
    tree.level = {}
    tree.counts = {}
    tree._next_id = max(by_id) + 1

    def _install(node, level):
        z = node["id"]
        tree.children[z] = list(node["children"])
        tree.weights[z] = np.asarray(node["beta"], float)
        tree.margins[z] = np.asarray(node["eta"], float)
        tree.level[z] = level
        tree.counts[z] = len(node["members"])
        for c in node["children"]:
            if c not in by_id:
                raise DataError(f"{path}: node {z} references missing child {c}")
            tree.parent[c] = z
            _install(by_id[c], level + 1)

    if root["id"] != Tree.ROOT:
        raise DataError(f"{path}: root node must have id {Tree.ROOT}")
    _install(root, 0)

    # per-datum paths from the deepest node containing each index
    membership: dict[int, list[int]] = {}
    for node in nodes:
        for n in node["members"]:
            membership.setdefault(n, []).append(node["id"])
    paths = []
    for n in sorted(membership):
        chain = sorted(membership[n], key=lambda z: tree.level[z])
        for a, b in zip(chain, chain[1:]):
            if tree.parent.get(b) != a:
                raise DataError(f"{path}: datum {n} memberships do not form a path")
        paths.append(tuple(chain))
    if membership and sorted(membership) != list(range(len(membership))):
        raise DataError(f"{path}: member indices are not dense from zero")
    return tree, paths


# -- Newick -------------------------------------------------------------------


def tree_to_newick(tree: Tree, paths=None) -> str:
    """Parenthesis form; leaves are named by their member counts."""
    leaf_members: dict[int, int] = {z: 0 for z in tree.children}
    if paths is not None:
        for path in paths:
            leaf_members[path[-1]] += 1

    def _emit(z: int) -> str:
        kids = tree.children[z]
        if not kids:
            return str(leaf_members[z])
        inner = ",".join(_emit(c) for c in kids)
        return f"({inner})n{z}"

    return _emit(Tree.ROOT) + ";"


# -- traces -------------------------------------------------------------------


def save_trace_csv(path, trace) -> None:
    """MCMC trace: iteration, cdl, rcdl, accept_rate."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("iteration,cdl,rcdl,accept_rate\n")
        for i, (c, r, a) in enumerate(zip(trace.cdl, trace.rcdl, trace.accept_rate)):
            fh.write(f"{i},{_fmt(c)},{_fmt(r)},{_fmt(a)}\n")


def save_vi_trace_csv(path, rows) -> None:
    """Variational trace: cycle, relbo, delta."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("cycle,relbo,delta\n")
        for cycle, value, delta in rows:
            fh.write(f"{cycle},{_fmt(value)},{_fmt(delta)}\n")


def save_eval_json(path, report) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(report.to_dict(), fh, indent=2)
        fh.write("\n")
