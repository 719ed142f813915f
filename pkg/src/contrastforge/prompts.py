"""Prompt templates for the generation chain. Template text is fixed verbatim;
tests pin each constant against a golden file, so any edit here must update the
goldens deliberately.

Rendering fills the input slots and drops the output-slot marker, leaving the
prompt to end at the "Output:" label for the model to continue.
"""

from __future__ import annotations

import re
from dataclasses import dataclass

from .errors import InvalidArgumentError

DIRECT_TEMPLATE = """\
Task Overview: Given the attributes of a positive item, generate contrasting negative attributes following the same structure as the positive item. The generated attributes should be semantically similar but different from the positive item.

Input: {Positive Attributes}

Output: {Negative Attributes}
"""

DESCRIBE_TEMPLATE = """\
Task Overview:
You are a descriptive writer who excels at capturing the essence and details of items in clear language. Generate natural, detailed description of the item shown in the given image.

Input:
{Item Image}

Output:
{Item Description}
"""

MASK_TEMPLATE = """\
Task Overview:
Transform the given item description by masking key feature words with [MASK].

Instructions:
- Analyze the given item description.
- Identify most significant words that represent (1) Core features (2) Distinctive characteristics (3) Key specifications
- Replace these words with [MASK].
- Only output the masked description.

Input:
{Item Description}

Output:
{Masked Description}
"""

COMPLETE_TEMPLATE = """\
Task Overview:
Complete the masked product description by filling in the missing words marked with [MASK].

Instructions:
- Analyze the given masked product description.
- Identify the possible words that can be used to complete the masked description.
- Replace the [MASK] tokens with the appropriate words.
- Ensure that the completed description is coherent and meaningful.
- Only the completed description is output.

Input:
{Masked Description}

Output:
{Generated Description}
"""


@dataclass(frozen=True)
class PromptTemplate:
    id: str
    text: str
    input_slots: tuple[str, ...]
    output_slot: str


TEMPLATES: dict[str, PromptTemplate] = {
    "direct": PromptTemplate("direct", DIRECT_TEMPLATE,
                             ("Positive Attributes",), "Negative Attributes"),
    "describe": PromptTemplate("describe", DESCRIBE_TEMPLATE,
                               ("Item Image",), "Item Description"),
    "mask": PromptTemplate("mask", MASK_TEMPLATE,
                           ("Item Description",), "Masked Description"),
    "complete": PromptTemplate("complete", COMPLETE_TEMPLATE,
                               ("Masked Description",), "Generated Description"),
}

_SLOT_PATTERN = re.compile(r"\{(Positive Attributes|Negative Attributes|Item Image|"
                           r"Item Description|Masked Description|Generated Description)\}")


def render_prompt(template_id: str, slots: dict[str, str]) -> str:
    if template_id not in TEMPLATES:
        raise InvalidArgumentError(
            f"unknown template {template_id!r}; expected one of {sorted(TEMPLATES)}")
    template = TEMPLATES[template_id]
    for slot in template.input_slots:
        if slot not in slots:
            raise InvalidArgumentError(
                f"missing slot {{{slot}}} for template {template_id!r}")
        if not str(slots[slot]).strip():
            raise InvalidArgumentError(
                f"slot {{{slot}}} for template {template_id!r} is empty")
    rendered = template.text
    for slot in template.input_slots:
        rendered = rendered.replace("{" + slot + "}", str(slots[slot]))
    rendered = rendered.replace("{" + template.output_slot + "}", "")
    rendered = rendered.rstrip() + "\n"
    leftover = _SLOT_PATTERN.search(rendered)
    if leftover:
        raise InvalidArgumentError(f"unfilled slot marker {leftover.group(0)} after render")
    return rendered
