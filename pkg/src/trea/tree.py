"""Rooted tree of entity mentions tracking the causal state of a dialogue.

A pseudo root anchors mentions that have no prior cause. Every mention event
adds exactly one node; growth is append-only, so any earlier state of the
tree is a prefix of the node list.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Any, Dict, List, Optional, Sequence

from .kg import KnowledgeGraph, is_adjacent

ROOT_ID = 0


@dataclass(frozen=True)
class TreeNode:
    node_id: int
    entity: Optional[int]  # None only for the root
    parent: Optional[int]  # None only for the root
    mention_index: int  # -1 for the root
    turn_index: int  # -1 for the root


@dataclass(frozen=True)
class ReasoningBranch:
    """Entities along one root-to-leaf path, root-adjacent node first."""

    entities: List[int]
    node_ids: List[int]

    def __post_init__(self):
        if not self.entities or len(self.entities) != len(self.node_ids):
            raise ValueError("branch must be non-empty with parallel id lists")


class ReasoningTree:
    def __init__(self):
        self.nodes: List[TreeNode] = [
            TreeNode(node_id=ROOT_ID, entity=None, parent=None, mention_index=-1, turn_index=-1)
        ]
        self.children_index: Dict[int, List[int]] = {ROOT_ID: []}

    @property
    def mention_count(self) -> int:
        return len(self.nodes) - 1

    def connect(self, e_star: int, kg: KnowledgeGraph, turn_index: int = 0) -> int:
        """Attach a new mention of ``e_star`` and return its node id.

        Existing mention nodes are scanned most recent first; the new node
        becomes a child of the first one whose entity is adjacent to
        ``e_star`` in the graph, falling back to the root.
        """
        kg._check_entity(e_star)
        parent = ROOT_ID
        for node in reversed(self.nodes[1:]):
            if is_adjacent(kg, node.entity, e_star):
                parent = node.node_id
                break
        node = TreeNode(
            node_id=len(self.nodes),
            entity=e_star,
            parent=parent,
            mention_index=self.mention_count,
            turn_index=turn_index,
        )
        self.nodes.append(node)
        self.children_index[node.node_id] = []
        self.children_index[parent].append(node.node_id)
        return node.node_id

    def branches(self) -> List[ReasoningBranch]:
        """One branch per leaf, entities in root-to-leaf order, sorted by leaf id."""
        leaves = [n.node_id for n in self.nodes[1:] if not self.children_index[n.node_id]]
        out = []
        for leaf in sorted(leaves):
            node_ids: List[int] = []
            cur = leaf
            while cur != ROOT_ID:
                node_ids.append(cur)
                cur = self.nodes[cur].parent
            node_ids.reverse()
            out.append(
                ReasoningBranch(
                    entities=[self.nodes[i].entity for i in node_ids], node_ids=node_ids
                )
            )
        return out

    def branches_containing(self, e: int) -> List[ReasoningBranch]:
        return [b for b in self.branches() if e in b.entities]

    def snapshot(self, n_nodes: int) -> "ReasoningTree":
        """Tree as it was when it had ``n_nodes`` nodes (growth is append-only)."""
        if not 1 <= n_nodes <= len(self.nodes):
            raise ValueError(f"snapshot size {n_nodes} out of range")
        out = ReasoningTree()
        for node in self.nodes[1:n_nodes]:
            out.nodes.append(node)
            out.children_index[node.node_id] = []
            out.children_index[node.parent].append(node.node_id)
        return out

    def copy(self) -> "ReasoningTree":
        return self.snapshot(len(self.nodes))

    def to_json_dict(self) -> Dict[str, Any]:
        return {
            "nodes": [
                {
                    "id": n.node_id,
                    "entity": n.entity,
                    "parent": n.parent,
                    "mention_index": n.mention_index,
                    "turn_index": n.turn_index,
                }
                for n in self.nodes
            ]
        }

    @classmethod
    def from_json_dict(cls, data: Dict[str, Any]) -> "ReasoningTree":
        tree = cls()
        nodes = sorted(data["nodes"], key=lambda d: d["id"])
        for d in nodes:
            if d["id"] == ROOT_ID:
                continue
            node = TreeNode(
                node_id=d["id"],
                entity=d["entity"],
                parent=d["parent"],
                mention_index=d["mention_index"],
                turn_index=d["turn_index"],
            )
            tree.nodes.append(node)
            tree.children_index[node.node_id] = []
            tree.children_index[node.parent].append(node.node_id)
        return tree

    def to_dot(self, kg: Optional[KnowledgeGraph] = None) -> str:
        lines = ["digraph reasoning_tree {"]
        for n in self.nodes:
            if n.node_id == ROOT_ID:
                label = "root"
            elif kg is not None:
                label = f"{kg.surface_form(n.entity)} (e{n.entity})"
            else:
                label = f"e{n.entity}"
            lines.append(f'  n{n.node_id} [label="{label}"];')
        for n in self.nodes[1:]:
            lines.append(f"  n{n.parent} -> n{n.node_id};")
        lines.append("}")
        return "\n".join(lines)

    def __eq__(self, other: object) -> bool:
        return isinstance(other, ReasoningTree) and self.nodes == other.nodes


def init_tree() -> ReasoningTree:
    return ReasoningTree()


def truncate_pad(branch: ReasoningBranch, max_len: int, pad: Any) -> List[Any]:
    """Fix a branch's entity list to ``max_len`` slots.

    Overlong branches keep the ``max_len`` entities nearest the leaf; short
    ones are right-padded with ``pad``.
    """
    if max_len < 1:
        raise ValueError("max_len must be >= 1")
    entities = list(branch.entities)
    if len(entities) > max_len:
        return entities[-max_len:]
    return entities + [pad] * (max_len - len(entities))
