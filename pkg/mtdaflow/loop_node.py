"""
LoopNode re-executes one inner PipelineNode until a condition on its final output holds.
"""

from __future__ import annotations

from typing import TYPE_CHECKING, Any, Dict

from .node import LimitSignal, StageNode
from .pipeline_node import PipelineNode

if TYPE_CHECKING:
    from .stages import RunContext


def _get_value_by_path(obj: Any, path: str) -> Any:
    """Simple JSONPath-like: $.key.nested -> obj['key']['nested']. Root $ is object itself."""
    if not path or path == "$":
        return obj
    if path.startswith("$."):
        path = path[2:]
    keys = path.split(".")
    cur = obj
    for k in keys:
        if isinstance(cur, dict) and k in cur:
            cur = cur[k]
        else:
            return None
    return cur


def _evaluate_condition_impl(output: Dict[str, Any], condition: Dict[str, Any]) -> bool:
    """
    Evaluate condition on output. Returns True to break loop.
    Error message includes JSONPath, operator, actual value, actual type.
    """
    path = condition.get("path") or "$"
    value = _get_value_by_path(output, path)
    value_ty = type(value).__name__
    if value is None and path != "$":
        raise ValueError(
            f"condition path not found: path={path!r} operator=N/A actual_value=None actual_type=missing"
        )
    if "equals" in condition:
        return value == condition["equals"]
    if "not_equals" in condition:
        return value != condition["not_equals"]
    for op in ("less_than", "greater_than"):
        if op in condition:
            ref = condition[op]
            if not isinstance(value, (int, float)) or not isinstance(ref, (int, float)):
                raise TypeError(
                    f"condition {op} type mismatch: path={path!r} operator={op} "
                    f"actual_value={value!r} actual_type={value_ty} ref={ref!r} ref_type={type(ref).__name__}"
                )
            return value < ref if op == "less_than" else value > ref
    return False


class LoopNode(StageNode):
    """
    Iterate one inner PipelineNode (same child instances) until condition.
    Condition is evaluated on the inner final output only when the inner status is done.
    params: {"limit": {"max_iterations": n}} bounds the loop (LimitSignal when exceeded).
    """

    def __init__(self, pipeline: PipelineNode, condition: Dict[str, Any] | None = None) -> None:
        super().__init__()
        self.pipeline = pipeline
        self.condition = condition or {}
        self._validate_condition_at_construction()
        self.iterations = 0

    def _validate_condition_at_construction(self) -> None:
        """Fail at construction if condition is missing or invalid."""
        if not self.condition:
            raise ValueError(
                "LoopNode requires condition (path + equals/not_equals/less_than/greater_than)"
            )
        if not any(
            k in self.condition
            for k in ("equals", "not_equals", "less_than", "greater_than")
        ):
            raise ValueError(
                "LoopNode condition requires one of: equals, not_equals, less_than, greater_than"
            )

    def read_error(self) -> list:
        """Aggregate fatal/limit causes from all descendants (including self). Returns list[Exception]."""
        out: list = list(self.pipeline.read_error())
        if self._status in ("fatal", "limit") and self._error is not None:
            out.append(self._error)
        return out

    def read_node_calls(self) -> int:
        """Aggregate node_calls of self and all descendants."""
        return self._my_node_calls + self.pipeline.read_node_calls()

    def get_final_output(self) -> Dict[str, Any]:
        return self.pipeline.get_final_output()

    def run(self, ctx: "RunContext", params: Dict[str, Any]) -> Dict[str, Any]:
        limit_cfg = (params or {}).get("limit") or {}
        max_iterations = (
            limit_cfg.get("max_iterations") if isinstance(limit_cfg, dict) else None
        )
        self.iterations = 0
        while True:
            self.iterations += 1
            if max_iterations is not None and self.iterations > max_iterations:
                raise LimitSignal(f"max_iterations={max_iterations} exceeded")
            self.pipeline.execute(ctx, {})
            status = self.pipeline.read_status()

            if status == "fatal":
                self._status = "fatal"
                return {}

            if status == "limit":
                self._status = "limit"
                return {}

            if status != "done":
                continue

            latest = self.pipeline.get_latest_output(self.pipeline.final_id)
            condition_input = latest if isinstance(latest, dict) else {}
            if _evaluate_condition_impl(condition_input, self.condition):
                break

        return self.pipeline.get_final_output()
