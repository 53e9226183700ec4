import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from app.exceptions import PreconditionError, ShapeError

logger = logging.getLogger(__name__)

GRAPHS_MAGIC = b"SAGCNGR\x00"
GRAPHS_VERSION = 1
BASE_GRAPH_NAME = "base"


def normalize_edges(pairs, num_users: int | None = None, num_items: int | None = None) -> np.ndarray:
    """Sorted, duplicate-free (E, 2) int64 edge array"""
    edges = np.asarray(list(pairs) if not isinstance(pairs, np.ndarray) else pairs, dtype=np.int64)
    if edges.size == 0:
        return np.zeros((0, 2), dtype=np.int64)
    edges = np.unique(edges.reshape(-1, 2), axis=0)
    if edges.min() < 0:
        raise PreconditionError("negative node index in edge list")
    if num_users is not None and edges[:, 0].max() >= num_users:
        raise PreconditionError(f"user index out of range [0, {num_users})")
    if num_items is not None and edges[:, 1].max() >= num_items:
        raise PreconditionError(f"item index out of range [0, {num_items})")
    return edges


def edge_keys(edges: np.ndarray, num_items: int) -> np.ndarray:
    return edges[:, 0] * np.int64(num_items) + edges[:, 1]


@dataclass(frozen=True)
class AspectInteractionStore:
    """Base interaction edges plus one edge list per aspect (vocabulary order)"""
    num_users: int
    num_items: int
    base_edges: np.ndarray
    aspect_edges: list[np.ndarray]
    aspect_names: list[str]

    def __post_init__(self):
        if len(self.aspect_edges) != len(self.aspect_names):
            raise ShapeError("one edge list per aspect name is required")
        base_keys = edge_keys(self.base_edges, self.num_items)
        for name, edges in zip(self.aspect_names, self.aspect_edges):
            if not np.isin(edge_keys(edges, self.num_items), base_keys).all():
                raise PreconditionError(f"aspect '{name}' has edges outside the base interactions")

    @classmethod
    def from_pairs(cls, num_users, num_items, base_pairs, aspect_pairs: dict[str, list]) -> "AspectInteractionStore":
        return cls(
            num_users=num_users,
            num_items=num_items,
            base_edges=normalize_edges(base_pairs, num_users, num_items),
            aspect_edges=[normalize_edges(pairs, num_users, num_items) for pairs in aspect_pairs.values()],
            aspect_names=list(aspect_pairs),
        )

    @property
    def num_aspects(self) -> int:
        return len(self.aspect_names)

    def top(self, n: int) -> "AspectInteractionStore":
        """Keep the first n aspects"""
        if n < 1 or n > self.num_aspects:
            raise PreconditionError(f"cannot select {n} aspects out of {self.num_aspects}")
        return AspectInteractionStore(
            self.num_users, self.num_items, self.base_edges, self.aspect_edges[:n], self.aspect_names[:n]
        )

    def ranked(self) -> "AspectInteractionStore":
        """Aspects reordered by edge count, largest first, ties by name"""
        order = sorted(range(self.num_aspects), key=lambda p: (-len(self.aspect_edges[p]), self.aspect_names[p]))
        return self.select([self.aspect_names[p] for p in order])

    def select(self, names: list[str]) -> "AspectInteractionStore":
        positions = [self.aspect_names.index(name) for name in names]
        return AspectInteractionStore(
            self.num_users,
            self.num_items,
            self.base_edges,
            [self.aspect_edges[p] for p in positions],
            [self.aspect_names[p] for p in positions],
        )

    def merged(self) -> "AspectInteractionStore":
        """Single-graph view whose only aspect is the full interaction graph"""
        return AspectInteractionStore(
            self.num_users, self.num_items, self.base_edges, [self.base_edges], [BASE_GRAPH_NAME]
        )


@dataclass
class AspectGraph:
    """Normalized bipartite incidence of one aspect, stored in both directions"""
    user_major: sp.csr_matrix
    item_major: sp.csr_matrix
    user_degrees: np.ndarray
    item_degrees: np.ndarray

    @property
    def num_edges(self) -> int:
        return int(self.user_major.nnz)


@dataclass
class NormalizedAspectGraph:
    num_users: int
    num_items: int
    aspect_names: list[str]
    graphs: list[AspectGraph] = field(default_factory=list)

    @property
    def num_aspects(self) -> int:
        return len(self.graphs)

    def edge_counts(self) -> dict[str, int]:
        return {name: graph.num_edges for name, graph in zip(self.aspect_names, self.graphs)}


def normalize_aspect(edges: np.ndarray, num_users: int, num_items: int) -> AspectGraph:
    """Coefficients c_ui = 1 / (sqrt(|N_u|) * sqrt(|N_i|)) on the edges of one aspect"""
    users, items = edges[:, 0], edges[:, 1]
    user_degrees = np.bincount(users, minlength=num_users).astype(np.int64)
    item_degrees = np.bincount(items, minlength=num_items).astype(np.int64)
    # Only edge endpoints are looked up, so isolated nodes never divide by zero
    coefficients = 1.0 / (np.sqrt(user_degrees[users]) * np.sqrt(item_degrees[items]))
    user_major = sp.csr_matrix((coefficients, (users, items)), shape=(num_users, num_items), dtype=np.float64)
    user_major.sort_indices()
    item_major = user_major.transpose().tocsr()
    item_major.sort_indices()
    return AspectGraph(user_major, item_major, user_degrees, item_degrees)


def build_graphs(
    store: AspectInteractionStore,
    train_edges,
    include_base_graph: bool = False,
) -> NormalizedAspectGraph:
    """Build one normalized graph per aspect from training edges only."""
    train = normalize_edges(train_edges, store.num_users, store.num_items)
    train_keys = edge_keys(train, store.num_items)
    base_keys = edge_keys(store.base_edges, store.num_items)
    if not np.isin(train_keys, base_keys).all():
        raise PreconditionError("training edges must be base interactions")

    names, edge_sets = [], []
    if include_base_graph:
        names.append(BASE_GRAPH_NAME)
        edge_sets.append(train)
    for name, edges in zip(store.aspect_names, store.aspect_edges):
        names.append(name)
        edge_sets.append(edges[np.isin(edge_keys(edges, store.num_items), train_keys)])

    graphs = []
    for name, edges in zip(names, edge_sets):
        if len(edges) == 0:
            logger.warning(f"Aspect '{name}' has no training edges; its graph is empty")
        graphs.append(normalize_aspect(edges, store.num_users, store.num_items))
    return NormalizedAspectGraph(store.num_users, store.num_items, names, graphs)


def _check_blocks(graph: NormalizedAspectGraph, aspect: int, user_block: np.ndarray, item_block: np.ndarray):
    if not 0 <= aspect < graph.num_aspects:
        raise ShapeError(f"aspect {aspect} out of range [0, {graph.num_aspects})")
    if user_block.ndim != 2 or item_block.ndim != 2:
        raise ShapeError("embedding blocks must be matrices")
    if user_block.shape[0] != graph.num_users or item_block.shape[0] != graph.num_items:
        raise ShapeError(
            f"blocks of {user_block.shape[0]} users / {item_block.shape[0]} items do not match "
            f"graph of {graph.num_users} users / {graph.num_items} items"
        )
    if user_block.shape[1] != item_block.shape[1]:
        raise ShapeError(f"embedding widths differ: {user_block.shape[1]} != {item_block.shape[1]}")


def propagate(
    graph: NormalizedAspectGraph, aspect: int, user_block: np.ndarray, item_block: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """One light convolution on the graph of `aspect`."""
    _check_blocks(graph, aspect, user_block, item_block)
    g = graph.graphs[aspect]
    return np.asarray(g.user_major @ item_block), np.asarray(g.item_major @ user_block)


def propagate_transpose(
    graph: NormalizedAspectGraph, aspect: int, user_grad: np.ndarray, item_grad: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Adjoint of `propagate`: pulls output gradients back to the input blocks.

    User outputs read item inputs, so the user-block gradient comes from the
    item gradients through the same coefficients, and vice versa.
    """
    _check_blocks(graph, aspect, user_grad, item_grad)
    g = graph.graphs[aspect]
    return np.asarray(g.user_major @ item_grad), np.asarray(g.item_major @ user_grad)


def _histogram(degrees: np.ndarray) -> dict[str, int]:
    values, counts = np.unique(degrees, return_counts=True)
    return {str(int(v)): int(c) for v, c in zip(values, counts)}


def graph_summary(graph: NormalizedAspectGraph) -> dict:
    return {
        "num_users": graph.num_users,
        "num_items": graph.num_items,
        "aspects": [
            {
                "name": name,
                "edges": g.num_edges,
                "user_degree_histogram": _histogram(g.user_degrees),
                "item_degree_histogram": _histogram(g.item_degrees),
            }
            for name, g in zip(graph.aspect_names, graph.graphs)
        ],
    }


def save_graphs(graph: NormalizedAspectGraph, path: Path, summary_path: Path | None = None) -> None:
    """Write the versioned little-endian CSR cache (64-bit indices)."""
    names = json.dumps(graph.aspect_names).encode("utf-8")
    with Path(path).open("wb") as handle:
        handle.write(GRAPHS_MAGIC)
        handle.write(np.array([GRAPHS_VERSION], dtype="<u4").tobytes())
        handle.write(
            np.array([graph.num_users, graph.num_items, graph.num_aspects, len(names)], dtype="<u8").tobytes()
        )
        handle.write(names)
        for g in graph.graphs:
            csr = g.user_major
            handle.write(np.array([csr.nnz], dtype="<u8").tobytes())
            handle.write(csr.indptr.astype("<i8").tobytes())
            handle.write(csr.indices.astype("<i8").tobytes())
            handle.write(csr.data.astype("<f8").tobytes())
    if summary_path is not None:
        Path(summary_path).write_text(json.dumps(graph_summary(graph), indent=2), encoding="utf-8")


def load_graphs(path: Path) -> NormalizedAspectGraph:
    buffer = Path(path).read_bytes()
    if buffer[: len(GRAPHS_MAGIC)] != GRAPHS_MAGIC:
        raise PreconditionError(f"{path} is not a graphs cache")
    offset = len(GRAPHS_MAGIC)
    version = int(np.frombuffer(buffer, dtype="<u4", count=1, offset=offset)[0])
    if version != GRAPHS_VERSION:
        raise PreconditionError(f"unsupported graphs cache version {version}")
    offset += 4
    num_users, num_items, num_aspects, names_len = (
        int(v) for v in np.frombuffer(buffer, dtype="<u8", count=4, offset=offset)
    )
    offset += 32
    names = json.loads(buffer[offset: offset + names_len].decode("utf-8"))
    offset += names_len

    graphs = []
    for _ in range(num_aspects):
        nnz = int(np.frombuffer(buffer, dtype="<u8", count=1, offset=offset)[0])
        offset += 8
        indptr = np.frombuffer(buffer, dtype="<i8", count=num_users + 1, offset=offset).copy()
        offset += 8 * (num_users + 1)
        indices = np.frombuffer(buffer, dtype="<i8", count=nnz, offset=offset).copy()
        offset += 8 * nnz
        data = np.frombuffer(buffer, dtype="<f8", count=nnz, offset=offset).copy()
        offset += 8 * nnz
        user_major = sp.csr_matrix((data, indices, indptr), shape=(num_users, num_items))
        item_major = user_major.transpose().tocsr()
        item_major.sort_indices()
        user_degrees = np.diff(indptr).astype(np.int64)
        item_degrees = np.diff(item_major.indptr).astype(np.int64)
        graphs.append(AspectGraph(user_major, item_major, user_degrees, item_degrees))
    return NormalizedAspectGraph(num_users, num_items, names, graphs)
