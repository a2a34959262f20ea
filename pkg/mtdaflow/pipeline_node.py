"""
PipelineNode runs an ordered list of stage nodes once over a shared RunContext.
"""

from __future__ import annotations

from typing import TYPE_CHECKING, Any, Dict, List, Sequence, Tuple

from .node import StageNode

if TYPE_CHECKING:
    from .stages import RunContext


_STATUS_PRIORITY = ["fatal", "limit", "executing", "done", "ready"]

ChildSpec = Tuple[str, StageNode, Dict[str, Any]]


def _aggregate_status(statuses: list[str]) -> str:
    """fatal > limit > executing > done > ready."""
    for s in _STATUS_PRIORITY:
        if s in statuses:
            return s
    return "ready"


class PipelineNode(StageNode):
    """
    One-shot execution of children in order. Holds latest output per child id;
    stops at the first child that ends fatal or limit. The last child is the final node.
    """

    def __init__(self, children: Sequence[ChildSpec]) -> None:
        super().__init__()
        ids = [cid for cid, _, _ in children]
        if len(set(ids)) != len(ids):
            raise ValueError(f"duplicate child ids in pipeline: {ids}")
        if not ids:
            raise ValueError("pipeline needs at least one child")
        self.children: List[ChildSpec] = list(children)
        self.final_id = ids[-1]
        self._latest_outputs: Dict[str, Dict[str, Any]] = {}

    def child(self, child_id: str) -> StageNode:
        for cid, node, _ in self.children:
            if cid == child_id:
                return node
        raise KeyError(child_id)

    def read_error(self) -> list:
        """Aggregate fatal/limit causes from all descendants (including self). Returns list[Exception]."""
        out: list = []
        for _, node, _ in self.children:
            e = node.read_error()
            if e is None:
                continue
            if isinstance(e, list):
                out.extend(e)
            else:
                out.append(e)
        if self._status in ("fatal", "limit") and self._error is not None:
            out.append(self._error)
        return out

    def read_node_calls(self) -> int:
        """Aggregate node_calls of self and all descendants."""
        total = self._my_node_calls
        for _, node, _ in self.children:
            total += node.read_node_calls()
        return total

    def get_latest_output(self, node_id: str) -> Dict[str, Any] | None:
        """Return latest output for node_id (for condition evaluation)."""
        return self._latest_outputs.get(node_id)

    def get_final_output(self) -> Dict[str, Any]:
        out = self._latest_outputs.get(self.final_id)
        return out if isinstance(out, dict) else {}

    def _aggregate_children_status(self) -> str:
        return _aggregate_status([node.read_status() for _, node, _ in self.children])

    def run(self, ctx: "RunContext", params: Dict[str, Any]) -> Dict[str, Any]:
        """Execute each child once, in order. Empty outputs ({}) do not overwrite latest outputs."""
        for cid, node, child_params in self.children:
            out = node.execute(ctx, child_params)
            if out != {}:
                self._latest_outputs[cid] = out
            trace = getattr(ctx, "trace", None)
            if trace is not None and not isinstance(node, PipelineNode):
                trace.append(
                    {
                        "node": cid,
                        "status": node.read_status(),
                        "revisions": {p: v["_meta"]["revision"] for p, v in out.items()},
                    }
                )
            st = node.read_status()
            if st in ("fatal", "limit"):
                self._status = st
                return {}
        self._status = self._aggregate_children_status()
        return self.get_final_output()

    def execute(self, ctx: "RunContext", params: Dict[str, Any] | None = None) -> Dict[str, Any]:
        out = super().execute(ctx, params)
        agg = self._aggregate_children_status()
        if agg in ("fatal", "limit"):
            self._status = agg
        return out
