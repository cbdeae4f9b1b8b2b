"""The SQL stage: compile one plan into one SQL statement.

Compilation runs at temperature 0 by default so that all output diversity is
attributable to the plans, and completions are post-processed with exact
fence/prose stripping rules because validity scoring depends on them.
"""

from __future__ import annotations

import re
from dataclasses import dataclass

from .gateway import ChatRequest, LlmGateway
from .planner import Plan, render_schema_block
from .templates import fill, load_template

# First of these keywords (as a whole word, case-insensitive) starts the SQL.
_SQL_KEYWORDS = (
    "select", "with", "insert", "update", "delete", "create", "drop", "alter",
    "replace", "pragma", "explain", "values", "vacuum",
)
_KEYWORD_RE = re.compile(r"\b(" + "|".join(_SQL_KEYWORDS) + r")\b", re.IGNORECASE)
_FENCE_RE = re.compile(r"```[a-zA-Z]*\n(.*?)```", re.DOTALL)


@dataclass(frozen=True)
class SqlCandidate:
    sql: str
    plan_index: int
    query_id: str
    error: str | None = None


@dataclass
class SqlAgentConfig:
    temperature: float = 0.0
    icl_enabled: bool = True

    def __post_init__(self):
        if self.temperature < 0.0:
            raise ValueError("temperature must be >= 0")


def postprocess_completion(text: str) -> str:
    """Strip code fences and leading prose up to the first SQL keyword.

    Idempotent: applying it to its own output changes nothing.
    """
    fenced = _FENCE_RE.search(text)
    if fenced:
        text = fenced.group(1)
    match = _KEYWORD_RE.search(text)
    if not match:
        return ""
    return text[match.start():].strip().rstrip("`").rstrip()


def render_plan_section(plan: Plan | None, question: str | None) -> str:
    if plan is None:
        return f"Question:\n{question}"
    lines = ["Plan:"]
    lines.extend(f"Step {i}: {step}" for i, step in enumerate(plan.steps, start=1))
    if plan.counterfactual is not None:
        lines.append(f"Counterfactual Condition: {plan.counterfactual[0]}")
        lines.append(f"Action After Condition: {plan.counterfactual[1]}")
    return "\n".join(lines)


def render_variant_section(plan: Plan | None) -> str:
    if plan is None or not plan.entity_variants:
        return ""
    lines = ["Entity surface forms (treat all alternatives as equivalent when matching):"]
    for entity, forms in plan.entity_variants.items():
        rendered = " OR ".join(f'"{form}"' for form in forms)
        lines.append(f"- {entity}: {rendered}")
    return "\n".join(lines)


def render_icl_section(icl) -> str:
    if not icl:
        return ""
    parts = ["Examples:"]
    for example in icl:
        parts.append(f"Q: {example.question}\nSQL: {example.gold_sql}")
    return "\n\n".join(parts)


def assemble_sql_prompt(plan: Plan | None, schema, icl, question: str | None = None) -> str:
    """Render the user prompt in the fixed order: plan, variants, examples, schema.

    With ``plan=None`` the question itself replaces the plan section (the
    pipeline's planner-bypass mode). Empty sections are omitted entirely.
    """
    if plan is None and question is None:
        raise ValueError("needs a plan or a question")
    frame = load_template("sql_prompt.txt")["user"]
    return fill(
        frame,
        plan=render_plan_section(plan, question),
        entity_variants=render_variant_section(plan),
        icl=render_icl_section(icl),
        schema=render_schema_block(schema),
    )


def sql_system_prompt() -> str:
    return load_template("sql_prompt.txt")["system"]


def generate_sql(plan: Plan | None, prompt: str, config: SqlAgentConfig,
                 gateway: LlmGateway, *, query_id: str, model_name: str,
                 meta: dict | None = None) -> SqlCandidate:
    """Compile one plan into one candidate.

    An empty post-processed completion marks the candidate with an error
    instead of raising, so remaining plans keep the pipeline going.
    """
    plan_index = plan.plan_index if plan is not None else 0
    request = ChatRequest(
        system_prompt=sql_system_prompt(),
        user_message=prompt,
        temperature=config.temperature,
        model_name=model_name,
    )
    response = gateway.complete(
        request, meta={**(meta or {}), "stage": "sql", "plan_index": plan_index}
    )
    sql = postprocess_completion(response.text)
    if not sql:
        return SqlCandidate(
            sql="", plan_index=plan_index, query_id=query_id,
            error="completion contained no SQL statement",
        )
    return SqlCandidate(sql=sql, plan_index=plan_index, query_id=query_id)
