"""The planning stage: prompt assembly, diverse plan generation, plan parsing.

Plans follow a line-oriented grammar that the base instructions teach the
model: ``Step <n>:`` lines, an optional ``Entity Variants:`` block, and an
optional two-line counterfactual header. The parser is total; text that fits
no part of the grammar degrades to a single-step raw plan instead of failing.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field

from .dataset import NlQuery
from .errors import PromptAssemblyError
from .gateway import ChatRequest, LlmGateway
from .guidelines import Guideline
from .retrieval import SchemaElement
from .templates import builtin_template_text, fill, load_template

_STEP_RE = re.compile(r"^\s*step\s+\d+\s*:\s*(.*?)\s*$", re.IGNORECASE)
_VARIANT_HEADER_RE = re.compile(r"^\s*entity variants\s*:\s*$", re.IGNORECASE)
_VARIANT_LINE_RE = re.compile(r'^\s*-\s*"(.+?)"\s*->\s*\[(.*)\]\s*$')
_QUOTED_RE = re.compile(r'"((?:[^"\\]|\\.)*)"')
_CONDITION_RE = re.compile(r"^\s*counterfactual condition\s*:\s*(.*\S)\s*$", re.IGNORECASE)
_ACTION_RE = re.compile(r"^\s*action after condition\s*:\s*(.*\S)\s*$", re.IGNORECASE)


@dataclass
class Plan:
    raw_text: str
    steps: tuple[str, ...]
    entity_variants: dict[str, tuple[str, ...]] = field(default_factory=dict)
    counterfactual: tuple[str, str] | None = None  # (condition, action)
    plan_index: int = 0


@dataclass
class PlannerConfig:
    temperature: float = 0.7
    num_plans: int = 3
    zh_mode: str = "direct"  # direct | translate

    def __post_init__(self):
        if self.num_plans < 1:
            raise ValueError("num_plans must be >= 1")
        if self.zh_mode not in ("direct", "translate"):
            raise ValueError(f"unknown zh_mode {self.zh_mode!r}")
        if not 0.0 <= self.temperature <= 2.0:
            raise ValueError("temperature must be within [0, 2]")


@dataclass(frozen=True)
class PlannerPrompt:
    """Assembled system-prompt inputs; rendering is pure and deterministic."""

    base_instructions: str
    guidelines: tuple[Guideline, ...]
    entity_linking_block: str
    schema_block: str

    def render(self) -> str:
        frame = load_template("planner_prompt.txt")["system"]
        return fill(
            frame,
            base=self.base_instructions,
            entity_linking=self.entity_linking_block,
            guidelines=render_guideline_block(self.guidelines),
            schema=self.schema_block,
        )


def render_guideline_block(guidelines) -> str:
    if not guidelines:
        return ""
    parts = ["Guidelines:"]
    for g in guidelines:
        parts.append(f"[{g.id}] ({g.category}) when: {g.trigger}\n{g.body.rstrip()}")
    return "\n\n".join(parts)


def render_schema_block(elements) -> str:
    if not elements:
        return ""
    lines = ["Schema excerpt:"]
    lines.extend(f"- {e.descriptor_text}" for e in elements)
    return "\n".join(lines)


def default_entity_linking_block() -> str:
    return builtin_template_text("entity_linking.txt").strip()


def default_base_instructions() -> str:
    return builtin_template_text("planner_base.txt").strip()


def assemble_planner_prompt(base: str, guidelines, schema: list[SchemaElement],
                            entity_linking_block: str | None = None) -> PlannerPrompt:
    """Combine prompt inputs in the fixed order base, entity block, guidelines, schema.

    Guidelines render in ascending id order, so equal guideline sets produce
    byte-equal prompts regardless of input order.
    """
    if not base or not base.strip():
        raise PromptAssemblyError("base instructions must be non-empty")
    ordered = sorted(guidelines, key=lambda g: g.id)
    ids = [g.id for g in ordered]
    if len(set(ids)) != len(ids):
        dupes = sorted({i for i in ids if ids.count(i) > 1})
        raise PromptAssemblyError(f"duplicate guideline ids: {dupes}")
    block = (entity_linking_block if entity_linking_block is not None
             else default_entity_linking_block())
    return PlannerPrompt(
        base_instructions=base.strip(),
        guidelines=tuple(ordered),
        entity_linking_block=block,
        schema_block=render_schema_block(schema),
    )


def parse_plan(raw: str, plan_index: int = 0) -> Plan:
    """Parse model output into a Plan; never raises.

    Unrecognized text degrades to a single raw-text step. Every parsed entity
    keeps its original surface form in its variant list.
    """
    steps: list[str] = []
    variants: dict[str, tuple[str, ...]] = {}
    condition: str | None = None
    action: str | None = None
    in_variant_block = False
    for line in raw.splitlines():
        step = _STEP_RE.match(line)
        if step:
            steps.append(step.group(1))
            in_variant_block = False
            continue
        if _VARIANT_HEADER_RE.match(line):
            in_variant_block = True
            continue
        if in_variant_block:
            variant = _VARIANT_LINE_RE.match(line)
            if variant:
                entity = variant.group(1)
                forms = _QUOTED_RE.findall(variant.group(2))
                deduped: list[str] = []
                for form in forms:
                    if form not in deduped:
                        deduped.append(form)
                if entity not in deduped:
                    deduped.insert(0, entity)
                variants[entity] = tuple(deduped)
                continue
            if line.strip():
                in_variant_block = False
        if condition is None:
            cond = _CONDITION_RE.match(line)
            if cond:
                condition = cond.group(1)
                continue
        if action is None:
            act = _ACTION_RE.match(line)
            if act:
                action = act.group(1)
                continue
    counterfactual = (condition, action) if condition is not None and action is not None else None
    if not steps:
        steps = [raw]
    return Plan(
        raw_text=raw,
        steps=tuple(steps),
        entity_variants=variants,
        counterfactual=counterfactual,
        plan_index=plan_index,
    )


def render_plan(plan: Plan) -> str:
    """Re-render a Plan in the canonical grammar (parse . render = parse)."""
    lines = []
    if plan.counterfactual is not None:
        lines.append(f"Counterfactual Condition: {plan.counterfactual[0]}")
        lines.append(f"Action After Condition: {plan.counterfactual[1]}")
    for i, step in enumerate(plan.steps, start=1):
        lines.append(f"Step {i}: {step}")
    if plan.entity_variants:
        lines.append("Entity Variants:")
        for entity, forms in plan.entity_variants.items():
            rendered = ", ".join('"' + f.replace("\\", "\\\\").replace('"', '\\"') + '"'
                                 for f in forms)
            lines.append(f'- "{entity}" -> [{rendered}]')
    return "\n".join(lines)


def generate_plans(query: NlQuery, prompt: PlannerPrompt, config: PlannerConfig,
                   gateway: LlmGateway, *, model_name: str, meta: dict | None = None) -> list[Plan]:
    """Generate exactly num_plans plans for one query.

    In translate mode a zh question is first rendered into English via the
    gateway and planning proceeds from the rendering; direct mode plans from
    the original text. Parse degradation never drops a plan.
    """
    meta = dict(meta or {})
    question = query.text
    if query.language == "zh" and config.zh_mode == "translate":
        sections = load_template("translate_prompt.txt")
        request = ChatRequest(
            system_prompt=fill(sections["system"]),
            user_message=fill(sections["user"], question=query.text),
            temperature=0.0,
            model_name=model_name,
        )
        response = gateway.complete(request, meta={**meta, "stage": "translate"})
        question = response.text.strip() or query.text
    user_frame = load_template("planner_prompt.txt")["user"]
    system_prompt = prompt.render()
    plans = []
    for index in range(config.num_plans):
        request = ChatRequest(
            system_prompt=system_prompt,
            user_message=fill(user_frame, question=question),
            temperature=config.temperature,
            model_name=model_name,
        )
        response = gateway.complete(
            request, meta={**meta, "stage": "plan", "plan_index": index}
        )
        plans.append(parse_plan(response.text, plan_index=index))
    return plans
