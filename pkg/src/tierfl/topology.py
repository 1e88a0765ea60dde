"""Multi-tier aggregation tree with per-node trust labels.

Layer 0 is the cloud (a single node), layers 1..L-1 are intermediate
aggregators, and layer L holds the edge devices.  Node ids are dense
0-based integers within each layer.  The tree is immutable after
construction and safe to share across workers.
"""
from __future__ import annotations

from dataclasses import dataclass, replace

from .errors import EmptyLayer, InvalidLayer, OrphanNode, TrustInconsistent, UnknownDevice

SECURE = "secure"
INSECURE = "insecure"


@dataclass(frozen=True)
class TierTopology:
    """L-layer tree below the cloud, with trust labels on layers 0..L-1."""

    num_layers: int                              # L: layers below the cloud
    layer_sizes: tuple                           # sizes of layers 1..L
    children: dict                               # (layer l, node) -> tuple of layer-(l+1) node ids
    parent: dict                                 # (layer l, node) -> parent id at layer l-1
    trust: dict                                  # (layer 0..L-1, node) -> True if secure

    def nodes(self, layer: int) -> range:
        if layer == 0:
            return range(1)
        if not 1 <= layer <= self.num_layers:
            raise InvalidLayer(f"layer {layer} outside [0, {self.num_layers}]")
        return range(self.layer_sizes[layer - 1])

    def size(self, layer: int) -> int:
        return 1 if layer == 0 else self.layer_sizes[layer - 1]

    def child_ids(self, layer: int, node: int) -> tuple:
        """Children of `node` (at `layer`) in layer+1.  Layer 0 is the cloud."""
        return self.children[(layer, node)]

    def is_secure(self, layer: int, node: int) -> bool:
        return self.trust[(layer, node)]

    @property
    def num_devices(self) -> int:
        return self.layer_sizes[-1]

    def device_path(self, device: int) -> list:
        """Ancestor ids of `device` at layers L-1, L-2, ..., 1."""
        path = []
        node = device
        for layer in range(self.num_layers, 1, -1):
            node = self.parent[(layer, node)]
            path.append(node)
        return path

    def devices_under(self, layer: int, node: int) -> list:
        """All layer-L device ids in the subtree rooted at (layer, node)."""
        if layer == self.num_layers:
            return [node]
        frontier = [node]
        for l in range(layer, self.num_layers):
            frontier = [c for n in frontier for c in self.children[(l, n)]]
        return frontier


@dataclass(frozen=True)
class TrustStats:
    """Secure-child ratios and minimum fanouts derived from a topology.

    Index l of `p_min`/`p_max` is the ratio of secure layer-l children over
    insecure layer-(l-1) parents; layers whose parents are all secure use the
    convention p=1, the cloud uses p_0 = 0 or 1 by its own label, and the
    device layer uses p_L = 1.  `fanout_min[l]` is the smallest child count
    over layer-l nodes (1 outside [1, L-1] so empty products stay natural).
    """

    num_layers: int
    p: dict                      # (layer l, insecure parent at l-1) -> ratio
    p_min: tuple                 # index 0..L
    p_max: tuple                 # index 0..L
    fanout_min: tuple            # index 0..L

    def with_device_fanout(self, fanout: int) -> "TrustStats":
        """Copy with the device-layer minimum fanout replaced (sampling)."""
        s = list(self.fanout_min)
        if self.num_layers >= 2:
            s[self.num_layers - 1] = int(fanout)
        return replace(self, fanout_min=tuple(s))


def _even_split(n_children: int, n_parents: int) -> list:
    """Contiguous split of range(n_children) over parents; remainder goes to
    the last parents."""
    base, rem = divmod(n_children, n_parents)
    sizes = [base + (1 if i >= n_parents - rem else 0) for i in range(n_parents)]
    out, start = [], 0
    for size in sizes:
        out.append(tuple(range(start, start + size)))
        start += size
    return out


def _normalize_label(value) -> bool:
    if isinstance(value, bool):
        return value
    if isinstance(value, str) and value.lower() in (SECURE, INSECURE):
        return value.lower() == SECURE
    raise TrustInconsistent(f"unrecognized trust label {value!r}")


def build_topology(layer_sizes, trust_assignment=None, cloud_secure=False,
                   children=None) -> TierTopology:
    """Build and validate the aggregation tree.

    `layer_sizes` lists N_1..N_L.  Children default to a contiguous even
    split of each layer over its parent layer.  `trust_assignment` maps
    (layer, node) -> "secure"/"insecure" (or bool) for layers 1..L-1;
    inconsistent labels are rejected, never repaired.
    """
    sizes = [int(n) for n in layer_sizes]
    if not sizes:
        raise EmptyLayer("at least one layer is required")
    for l, n in enumerate(sizes, start=1):
        if n <= 0:
            raise EmptyLayer(f"layer {l} has no nodes")
    L = len(sizes)

    child_map = {}
    parent_map = {}
    parents_per_layer = [1] + sizes[:-1]
    for l in range(0, L):
        n_parents = parents_per_layer[l]
        n_children = sizes[l]
        if children is not None and l in children:
            groups = [tuple(g) for g in children[l]]
            if len(groups) != n_parents:
                raise OrphanNode(f"layer {l}: {len(groups)} child groups for {n_parents} parents")
        else:
            groups = _even_split(n_children, n_parents)
        seen = set()
        for c, group in enumerate(groups):
            if not group:
                raise EmptyLayer(f"node {c} at layer {l} has no children")
            child_map[(l, c)] = group
            for i in group:
                if i in seen or not 0 <= i < n_children:
                    raise OrphanNode(f"layer {l + 1} node {i} has conflicting parents")
                seen.add(i)
                parent_map[(l + 1, i)] = c
        if len(seen) != n_children:
            missing = set(range(n_children)) - seen
            raise OrphanNode(f"layer {l + 1} nodes {sorted(missing)} have no parent")

    trust = {(0, 0): bool(cloud_secure)}
    given = {k: _normalize_label(v) for k, v in (trust_assignment or {}).items()}
    for l in range(1, L):
        for c in range(sizes[l - 1]):
            if (l, c) not in given:
                raise TrustInconsistent(f"missing trust label for layer {l} node {c}")
            trust[(l, c)] = given[(l, c)]

    topo = TierTopology(num_layers=L, layer_sizes=tuple(sizes),
                        children=child_map, parent=parent_map, trust=trust)

    # A secure node may not have an insecure child: insecurity propagates up.
    for l in range(0, L - 1):
        for c in topo.nodes(l):
            if topo.is_secure(l, c):
                for i in topo.child_ids(l, c):
                    if not topo.is_secure(l + 1, i):
                        raise TrustInconsistent(
                            f"secure node {c} at layer {l} has insecure child {i}")
    return topo


def trust_from_layer_ratios(layer_sizes, secure_ratios, cloud_secure=False) -> dict:
    """Deterministic trust assignment hitting per-layer secure-child ratios.

    `secure_ratios[l-1]` is the fraction of secure children under each
    insecure layer-(l-1) parent; children of secure parents are forced
    secure, matching the upward propagation rule.
    """
    sizes = [int(n) for n in layer_sizes]
    L = len(sizes)
    if len(secure_ratios) != max(L - 1, 0):
        raise TrustInconsistent(
            f"need {L - 1} ratios for layers 1..{L - 1}, got {len(secure_ratios)}")
    skeleton = build_topology(sizes, {(l, c): SECURE for l in range(1, L)
                                      for c in range(sizes[l - 1])}, cloud_secure=True)
    trust = {}
    secure_above = {(0, 0): bool(cloud_secure)}
    for l in range(1, L):
        ratio = float(secure_ratios[l - 1])
        if not 0.0 <= ratio <= 1.0:
            raise TrustInconsistent(f"ratio for layer {l} outside [0, 1]")
        for c in range(1 if l == 1 else sizes[l - 2]):
            group = skeleton.child_ids(l - 1, c)
            if secure_above[(l - 1, c)]:
                labels = [True] * len(group)
            else:
                n_secure = int(ratio * len(group) + 0.5)
                labels = [i < n_secure for i in range(len(group))]
            for i, lab in zip(group, labels):
                trust[(l, i)] = SECURE if lab else INSECURE
                secure_above[(l, i)] = lab
    return trust


def derive_trust_stats(topology: TierTopology) -> TrustStats:
    """Compute secure-child ratios p, their per-layer extremes, and minimum
    fanouts, with the cloud/device-layer conventions applied."""
    L = topology.num_layers
    p = {}
    p_min = [1.0] * (L + 1)
    p_max = [1.0] * (L + 1)
    cloud_secure = topology.is_secure(0, 0)
    p_min[0] = p_max[0] = 1.0 if cloud_secure else 0.0

    for l in range(1, L):
        ratios = []
        for c in topology.nodes(l - 1):
            if topology.is_secure(l - 1, c):
                continue
            group = topology.child_ids(l - 1, c)
            n_secure = sum(topology.is_secure(l, i) for i in group)
            ratio = n_secure / len(group)
            p[(l, c)] = ratio
            ratios.append(ratio)
        if ratios:
            p_min[l] = min(ratios)
            p_max[l] = max(ratios)
        # else: every layer-(l-1) parent is secure; convention p = 1 stands.

    fanout_min = [1] * (L + 1)
    for l in range(1, L):
        fanout_min[l] = min(len(topology.child_ids(l, c)) for c in topology.nodes(l))

    return TrustStats(num_layers=L, p=p, p_min=tuple(p_min), p_max=tuple(p_max),
                      fanout_min=tuple(fanout_min))


def ancestor_of(topology: TierTopology, device: int, layer: int) -> int:
    """The unique layer-`layer` node on the path from `device` to the root."""
    if not 1 <= layer <= topology.num_layers - 1:
        raise InvalidLayer(f"layer {layer} outside [1, {topology.num_layers - 1}]")
    if not 0 <= device < topology.num_devices:
        raise UnknownDevice(f"device {device} outside layer {topology.num_layers}")
    node = device
    for l in range(topology.num_layers, layer, -1):
        node = topology.parent[(l, node)]
    return node
