"""Instruction-data compiler: scene records to dialogue samples.

Converts symbolic scene descriptions (objects, relationships, region
descriptions, captions; relative [0, 1] coordinates) into prompt/response
pairs using fixed task templates, builds the prompts used for
assistant-generated data and for semantic negative mining, and balances
positive against negative samples. Calls to an external dialogue model go
through a pluggable single request/response client; tests use the canned
stub.
"""

from __future__ import annotations

import json
import os
import time
import zlib
from dataclasses import dataclass

import numpy as np
import requests

from .grounding import GroundedText, parse_grounded_text
from .quantizer import FEATURE_PLACEHOLDER, QuantizerConfig, quantize, render_coords

TASKS = (
    "refer_object",
    "refer_relation",
    "refer_region",
    "rec",
    "phrase_grounding",
    "detection",
    "grounded_caption",
    "hallucination",
)

TEMPLATES: dict[str, tuple[str, ...]] = {
    "refer_object": (
        "What is the class of the object <location> within the image?",
        "Classify object <location> in the image.",
        "Identify the object <location> in the image.",
    ),
    "refer_relation": (
        "What does <object1> <location1> do to <object2> <location2> of the image?",
        "What is the physical relation between <object1> <location1> and "
        "<object2> <location2>?",
        "Can you figure out the geometric relation of the <object1> <location1> "
        "and <object2> <location2>?",
    ),
    "refer_region": (
        "Describe the region <location> in a short phrase.",
        "What is in the region <location>? Describe in a phrase.",
        "Capture in a phrase: what's near region <location> in the picture?",
    ),
    "rec": (
        "Where is <object> in the image?",
        "What are the coordinates for the given <object> in the image?",
        "Given the image, could you please tell me where is <object>",
    ),
    "phrase_grounding": (
        "What are the locations of <objects>?",
        "Could you provide me with the exact locations of <objects>?",
        "Please indicate the positions of <objects> in the image?",
    ),
    "detection": (
        "Detect all objects among <class> in the image.",
        "Perform object detection given the image within <class>.",
        "Given the image and set <class>, identify all the objects that belong "
        "to the set.",
    ),
    "grounded_caption": (
        "What is this photo about? Use concise language.",
        "Describe the overall picture in just a few words.",
        "What do you see happening in this image? Provide the answer in short.",
    ),
    "hallucination": (
        "Is there a <object> in the image?",
        "Are there <object> in the image?",
        "Please tell me whether <object> exists in the image?",
    ),
}

_PLACEHOLDERS: dict[str, tuple[str, ...]] = {
    "refer_object": ("location",),
    "refer_relation": ("object1", "location1", "object2", "location2"),
    "refer_region": ("location",),
    "rec": ("object",),
    "phrase_grounding": ("objects",),
    "detection": ("class",),
    "grounded_caption": (),
    "hallucination": ("object",),
}

# Fixed answer phrasings for existence questions (FORMATS.md).
REFUSAL_FORMS = (
    "No, there is no {object} in the image.",
    "There is no {object} in the image.",
    "No, I cannot find any {object} in the image.",
)
AFFIRMATIVE_FORMS = (
    "Yes, there is a {object} {location} in the image.",
    "Yes, a {object} {location} is in the image.",
    "Yes, the image contains a {object} {location}.",
)


class UnknownTaskError(ValueError):
    pass


class MissingSlotError(ValueError):
    pass


class ExhaustedVocabularyError(ValueError):
    """No vocabulary class is absent from the scene."""


class MissingAlignmentsError(ValueError):
    """Captions exist but carry no phrase-to-box alignments."""


def _rng(seed: int, *indices: int) -> np.random.Generator:
    return np.random.Generator(
        np.random.Philox(np.random.SeedSequence([seed, *indices]))
    )


@dataclass(frozen=True)
class SceneObject:
    name: str
    box: tuple[float, float, float, float]  # relative [0, 1] coordinates
    mask: dict | None = None


@dataclass(frozen=True)
class Relationship:
    object_index: int
    predicate: str
    subject_index: int


@dataclass(frozen=True)
class RegionDescription:
    box: tuple[float, float, float, float]
    text: str


@dataclass(frozen=True)
class CaptionGrounding:
    caption_index: int
    phrase: str
    start: int
    end: int
    box: tuple[float, float, float, float]


@dataclass(frozen=True)
class SceneRecord:
    image_id: str
    width: int
    height: int
    objects: tuple[SceneObject, ...] = ()
    relationships: tuple[Relationship, ...] = ()
    region_descriptions: tuple[RegionDescription, ...] = ()
    captions: tuple[str, ...] = ()
    caption_groundings: tuple[CaptionGrounding, ...] | None = None

    def __post_init__(self):
        for rel in self.relationships:
            for idx in (rel.object_index, rel.subject_index):
                if not 0 <= idx < len(self.objects):
                    raise ValueError(
                        f"scene {self.image_id}: relationship object index {idx} "
                        f"out of range"
                    )
        for obj in self.objects:
            if any(not 0.0 <= v <= 1.0 for v in obj.box):
                raise ValueError(
                    f"scene {self.image_id}: box {obj.box} outside [0, 1]"
                )

    def class_names(self) -> list[str]:
        seen = []
        for obj in self.objects:
            if obj.name not in seen:
                seen.append(obj.name)
        return seen


@dataclass(frozen=True)
class InstructionSample:
    prompt: str
    response: str
    task: str
    polarity: str = "positive"
    image_id: str = ""
    source: str = ""

    def __post_init__(self):
        if self.task not in TASKS:
            raise UnknownTaskError(f"unknown task {self.task!r}")
        if self.polarity not in ("positive", "negative"):
            raise ValueError(f"polarity must be positive/negative, got {self.polarity}")
        if self.polarity == "negative" and self.task != "hallucination":
            raise ValueError("negative polarity is only valid for hallucination")

    def to_json(self) -> dict:
        return {
            "prompt": self.prompt,
            "response": self.response,
            "task": self.task,
            "polarity": self.polarity,
            "image_id": self.image_id,
        }


def fill_template(task: str, slots: dict[str, str], seed: int) -> str:
    """Pick one of the task's templates uniformly by seed and fill its slots."""
    if task not in TEMPLATES:
        raise UnknownTaskError(f"unknown task {task!r}")
    missing = [p for p in _PLACEHOLDERS[task] if p not in slots]
    if missing:
        raise MissingSlotError(f"task {task!r} missing slots {missing}")
    template = TEMPLATES[task][int(_rng(seed, 0).integers(len(TEMPLATES[task])))]
    for key, value in slots.items():
        template = template.replace(f"<{key}>", str(value))
    return template


def relative_bins(box, cfg: QuantizerConfig) -> tuple[int, int, int, int]:
    """Quantize a relative [0, 1] box straight to bins (extent 1 per axis)."""
    return tuple(quantize(float(v), 1.0, cfg) for v in box)


def render_location(
    box,
    cfg: QuantizerConfig,
    include_feature: bool = True,
    coord_style: str = "bins",
) -> str:
    """Coordinate text for a prompt slot: bin ints (model-ready, with the
    feature placeholder) or bare 3-decimal relative floats (assistant
    prompts)."""
    if coord_style == "bins":
        coords = render_coords(relative_bins(box, cfg))
        return f"{coords} {FEATURE_PLACEHOLDER}" if include_feature else coords
    if coord_style == "float":
        return "[" + ", ".join(f"{float(v):.3f}" for v in box) + "]"
    raise ValueError(f"unknown coord_style {coord_style!r}")


def convert_record(
    scene: SceneRecord,
    task: str,
    cfg: QuantizerConfig = QuantizerConfig(),
    seed: int = 0,
    include_feature: bool = True,
    coord_style: str = "bins",
) -> list[InstructionSample]:
    """Compile one scene into instruction samples for one task.

    Referring tasks put coordinates in the prompt; grounding tasks put bin
    coordinates in the response, in the ``<query> [box].`` shape the parser
    recovers.
    """
    if task not in TASKS:
        raise UnknownTaskError(f"unknown task {task!r}")

    def loc(box):
        return render_location(box, cfg, include_feature, coord_style)

    def bins_text(box):
        return render_coords(relative_bins(box, cfg))

    samples = []

    def add(prompt, response, polarity="positive"):
        samples.append(
            InstructionSample(
                prompt=prompt,
                response=response,
                task=task,
                polarity=polarity,
                image_id=scene.image_id,
                source="template",
            )
        )

    if task == "refer_object":
        for i, obj in enumerate(scene.objects):
            add(fill_template(task, {"location": loc(obj.box)}, _sub(seed, i)), obj.name)
    elif task == "refer_relation":
        for i, rel in enumerate(scene.relationships):
            a = scene.objects[rel.object_index]
            b = scene.objects[rel.subject_index]
            prompt = fill_template(
                task,
                {
                    "object1": a.name,
                    "location1": loc(a.box),
                    "object2": b.name,
                    "location2": loc(b.box),
                },
                _sub(seed, i),
            )
            add(prompt, f"The {a.name} {rel.predicate} the {b.name}.")
    elif task == "refer_region":
        for i, region in enumerate(scene.region_descriptions):
            add(
                fill_template(task, {"location": loc(region.box)}, _sub(seed, i)),
                region.text,
            )
    elif task == "rec":
        for i, obj in enumerate(scene.objects):
            add(
                fill_template(task, {"object": obj.name}, _sub(seed, i)),
                f"{obj.name} {bins_text(obj.box)}.",
            )
    elif task == "phrase_grounding":
        if scene.objects:
            names = ", ".join(o.name for o in scene.objects)
            response = (
                ", ".join(f"{o.name} {bins_text(o.box)}" for o in scene.objects) + "."
            )
            add(fill_template(task, {"objects": names}, _sub(seed, 0)), response)
    elif task == "detection":
        if scene.objects:
            classes = ", ".join(scene.class_names())
            response = (
                ", ".join(f"{o.name} {bins_text(o.box)}" for o in scene.objects) + "."
            )
            add(fill_template(task, {"class": classes}, _sub(seed, 0)), response)
    elif task == "grounded_caption":
        if scene.captions:
            if scene.caption_groundings is None:
                raise MissingAlignmentsError(
                    f"scene {scene.image_id}: captions have no groundings"
                )
            for i, caption in enumerate(scene.captions):
                aligned = [
                    (g.phrase, (g.start, g.end), g.box)
                    for g in scene.caption_groundings
                    if g.caption_index == i
                ]
                grounded = _insert_groups(caption, aligned, cfg)
                add(fill_template(task, {}, _sub(seed, i)), grounded)
    elif task == "hallucination":
        for i, obj in enumerate(scene.objects):
            prompt = fill_template(task, {"object": obj.name}, _sub(seed, i))
            form = AFFIRMATIVE_FORMS[
                int(_rng(seed, i, 1).integers(len(AFFIRMATIVE_FORMS)))
            ]
            add(
                prompt,
                form.format(object=obj.name, location=bins_text(obj.box)),
            )
    return samples


def _sub(seed: int, index: int) -> int:
    # Stable per-item template seed.
    return int(np.random.SeedSequence([seed, index]).generate_state(1)[0])


def _insert_groups(text: str, aligned, cfg: QuantizerConfig) -> str:
    """Insert quantized relative boxes after char ranges, right to left."""
    _check_ranges(text, [rng for _, rng, _ in aligned])
    out = text
    for _, (start, end), box in sorted(aligned, key=lambda a: a[1][0], reverse=True):
        out = out[:end] + " " + render_coords(relative_bins(box, cfg)) + out[end:]
    return out


def _check_ranges(text: str, ranges) -> None:
    ordered = sorted(ranges)
    for start, end in ordered:
        if not (0 <= start < end <= len(text)):
            raise ValueError(f"char range ({start}, {end}) invalid for text")
    for (_, e1), (s2, _) in zip(ordered, ordered[1:]):
        if s2 < e1:
            raise ValueError("char ranges overlap")


def append_pseudo_grounding(
    text: str,
    detections,
    image_size: tuple[int, int],
    cfg: QuantizerConfig = QuantizerConfig(),
) -> GroundedText:
    """Append detector boxes right after their phrases in an existing text.

    Detections are (phrase, (start, end), box-in-pixels) triples with
    non-overlapping ranges; insertion runs right to left so earlier ranges
    stay valid. The result re-parses into spans.
    """
    width, height = image_size
    _check_ranges(text, [rng for _, rng, _ in detections])
    out = text
    for _, (start, end), box in sorted(
        detections, key=lambda d: d[1][0], reverse=True
    ):
        bins = (
            quantize(box.x_min, width, cfg),
            quantize(box.y_min, height, cfg),
            quantize(box.x_max, width, cfg),
            quantize(box.y_max, height, cfg),
        )
        out = out[:end] + " " + render_coords(bins) + out[end:]
    return parse_grounded_text(out, cfg.n_bins)


def mine_negative_image_conditioned(
    scene: SceneRecord, vocabulary, seed: int = 0
) -> InstructionSample:
    """Ask to localize a vocabulary class absent from the scene; the answer
    is a fixed refusal form."""
    present = {o.name.casefold() for o in scene.objects}
    absent = sorted(v for v in vocabulary if v.casefold() not in present)
    if not absent:
        raise ExhaustedVocabularyError(
            f"scene {scene.image_id}: every vocabulary class is present"
        )
    rng = _rng(seed, 0)
    target = absent[int(rng.integers(len(absent)))]
    prompt = fill_template("hallucination", {"object": target}, _sub(seed, 1))
    form = REFUSAL_FORMS[int(_rng(seed, 2).integers(len(REFUSAL_FORMS)))]
    return InstructionSample(
        prompt=prompt,
        response=form.format(object=target),
        task="hallucination",
        polarity="negative",
        image_id=scene.image_id,
        source="image_conditioned",
    )


SEMANTIC_NEGATIVE_SYSTEM_PROMPT = """\
You are an AI visual assistant that can analyze a single image. You receive \
several entities given by a list, each describing the objects in the image \
you are observing.

For each entity mentioned, change them with the most misleading entity name \
(may belong to the same category but are actually different) (nonexistent \
objects: man -> woman, nonexistent attributes: brown -> yellow, nonexistent \
quantities: two -> three, etc.). The instructions should contain \
interrogative and declarative sentences.

The output format needs to be a list only which contains the misleading \
entity names. Please follow the instructions carefully.

1. The length of the output list needs to be exactly equal to the input list.

2. Do not explain the reasons.

3. Do not mention the input entities, at least the output name and input name \
needs to be different.

4. Do not mention something abstract, like "alien".

5. When dealing with quantities, focus solely on increasing the numbers \
during revision.

6. When dealing with words like "a few", "a group", "several", "some", etc., \
try changing the objects (A few men -> A few women).

7. Ensure that inclusive words are not substituted with their specific \
subsets. For example, if the word is "people," avoid replacing it with \
genders like "man" or "woman." Instead, consider modifying them to different \
categories, such as "people" -> "animals"."""


def build_semantic_negative_prompt(entities) -> str:
    """System prompt asking for the most misleading analog of each entity."""
    entities = [str(e) for e in entities]
    if not entities:
        raise ValueError("entity list must be non-empty")
    return (
        SEMANTIC_NEGATIVE_SYSTEM_PROMPT
        + "\n\nInput list: "
        + json.dumps(entities)
    )


def parse_entity_list(reply: str, expected: int) -> list[str]:
    """Read the client's misleading-entity list (JSON list or one per line)."""
    reply = reply.strip()
    entities: list[str]
    try:
        parsed = json.loads(reply)
        entities = [str(e) for e in parsed] if isinstance(parsed, list) else []
    except json.JSONDecodeError:
        entities = [line.strip("-* \t") for line in reply.splitlines() if line.strip()]
    if len(entities) != expected:
        raise ValueError(
            f"client returned {len(entities)} entities, expected {expected}"
        )
    return entities


def mine_negative_semantic(
    scene: SceneRecord, client, seed: int = 0, entities=None
) -> list[InstructionSample]:
    """Negative existence questions about the most misleading analogs of the
    scene's entities, as produced by the dialogue client."""
    entities = [str(e) for e in entities] if entities else scene.class_names()
    if not entities:
        return []
    reply = client.complete(build_semantic_negative_prompt(entities))
    negatives = parse_entity_list(reply, len(entities))
    samples = []
    for i, target in enumerate(negatives):
        prompt = fill_template("hallucination", {"object": target}, _sub(seed, i))
        form = REFUSAL_FORMS[int(_rng(seed, i, 3).integers(len(REFUSAL_FORMS)))]
        samples.append(
            InstructionSample(
                prompt=prompt,
                response=form.format(object=target),
                task="hallucination",
                polarity="negative",
                image_id=scene.image_id,
                source="semantic",
            )
        )
    return samples


def balance(samples, seed: int = 0) -> list[InstructionSample]:
    """Equalize polarity counts per task by downsampling the larger side.

    Positives are shared across the negative-mining variants (both phrase
    their negatives as hallucination-task questions), so equilibrium is
    enforced on the task pool; tasks without negatives pass through
    unchanged.
    """
    groups: dict[str, list[int]] = {}
    for i, s in enumerate(samples):
        groups.setdefault(s.task, []).append(i)
    keep = set()
    for task, indices in groups.items():
        pos = [i for i in indices if samples[i].polarity == "positive"]
        neg = [i for i in indices if samples[i].polarity == "negative"]
        if not neg:
            keep.update(indices)
            continue
        m = min(len(pos), len(neg))
        rng = _rng(seed, zlib.crc32(task.encode()))
        for side in (pos, neg):
            if len(side) > m:
                picked = rng.choice(len(side), size=m, replace=False)
                keep.update(side[j] for j in sorted(picked))
            else:
                keep.update(side)
    return [s for i, s in enumerate(samples) if i in keep]


def dedup(samples, image_ids) -> list[InstructionSample]:
    """Drop samples whose image id appears in the exclusion list."""
    banned = {str(i) for i in image_ids}
    return [s for s in samples if str(s.image_id) not in banned]


# --- assistant prompt assembly ---

_DIALOGUE_SYSTEM_PROMPTS = {
    "conversation": """\
You are an AI visual assistant that can analyze a single image. You receive \
five global captions, each describing the same image you are observing. In \
addition, specific object locations within the image are given, along with \
detailed coordinates. These coordinates are in the form of bounding boxes, \
represented as (x1, y1, x2, y2) with floating numbers ranging from 0 to 1. \
These values correspond to the top left x, top left y, bottom right x, and \
bottom right y. Also, the relationships between pairs of objects are \
provided in the format of object -> relationship -> subject, where the \
object/subject are indexed by object id from previous object lists as well \
as the object names. Also, several region descriptions are given, each \
describing a box region of the image, with detailed coordinates.

Design a conversation between you and a person asking about this photo. Ask \
diverse questions and give corresponding answers. The answers should be in a \
tone that a visual AI assistant is seeing the image and answering the \
question.

Here are some additional requirements about generated questions and answers:

1. Only include questions that have definite answers:
(1) one can see the content in the image that the question asks about and \
can answer confidently;
(2) one can determine confidently from the image that it is not in the image.
Do not ask any questions that cannot be answered confidently.

2. Also include complex questions that are relevant to the content in the \
image, for example, asking about background knowledge of the objects in the \
image, asking to discuss events happening in the image, asking about object \
actions in the context of entire images, etc. Again, do not ask about \
uncertain details.

3. Provide detailed answers when answering complex questions. For example, \
give detailed examples or reasoning steps to make the content more \
convincing and well-organized. You can include multiple paragraphs if \
necessary.

4. In all samples, either in question or answer, you must mention bounding \
box coordinates to refer to the object or regions instead of directly saying \
the object name or describing the regions in text. In answer, explain the \
region in the context of the scene.

5. Do not mention that the information source is provided in the \
text/caption/region description. Always answer as if you are directly \
looking at the image.

6. Make the question as diverse as possible. Include questions asking about \
the visual content of the image, including the object types, counting the \
objects, object actions, object locations, relative positions between \
objects, object selection, object functions, etc. Make the question \
challenging by less including the visual content details in the question.""",
    "reasoning": """\
You are an AI visual assistant that can analyze a single image. You receive \
five global captions, each describing the same image you are observing. In \
addition, specific object locations within the image are given, along with \
detailed coordinates. These coordinates are in the form of bounding boxes, \
represented as (x1, y1, x2, y2) with floating numbers ranging from 0 to 1. \
These values correspond to the top left x, top left y, bottom right x, and \
bottom right y. Also, the relationships between pairs of objects are \
provided, in the format of object -> relationship -> subject, where the \
object/subject are indexed by object id from previous object lists as well \
as the object names. Also, several region descriptions are given, each \
describing a box region of the image, with detailed coordinates.

The task is to use the provided image information (objects, attribute, \
relationship, region description, captions), create a plausible and \
challenging question about the image, and provide the answer in detail.

Create complex questions that mention specific regions of the image, but the \
question should require some knowledge-aware or high-level commonsense \
reasoning beyond describing the scene.

To answer such questions, one should first understand the visual content, \
then based on the background knowledge or reasoning, either explain why the \
things are happening that way or provide guides and help to the user's \
request. Make the question challenging by not including the visual content \
details in the question so that the user needs to reason about that first.

Here are some additional requirements about generated questions and answers:

1. In question or answer, you must mention bounding box coordinates to refer \
to the object or regions, instead of directly say the object name or \
describing the regions in text. In answers, explain the region in the \
context of scene. Include details like object counts, position of the \
objects, relative position between the objects.

2. Don't ask the question you are not confident to answer. Only include \
question that have definite answer.

3. Do not mention that the information source is provided in \
text/caption/region description. Always answer as if you are directly \
looking at the image.

4. Make the question as diverse as possible and as complex-reasoning \
required as possible.""",
    "referring_description": """\
You are an AI visual assistant that can analyze a single image. You receive \
five global captions, each describing the same image you are observing. In \
addition, specific object locations within the image are given, along with \
detailed coordinates. These coordinates are in the form of bounding boxes, \
represented as (x1, y1, x2, y2) with floating numbers ranging from 0 to 1. \
These values correspond to the top left x, top left y, bottom right x, and \
bottom right y. Also, the relationships between pairs of objects are \
provided, in the format of object -> relationship -> subject, where the \
object/subject are indexed by object id from previous object lists as well \
as the object names. Also, several region description are given, each \
describing a box region of image, with detailed coordinates.

The task is to use the provided image information (objects, attribute, \
relationship, region description, captions), create a plausible and \
challenging question about the image, and provide the answer in detail.

Create questions that refer to coordinates of some objects or regions \
without describing it, and ask about its interaction with \
surrounding/nearby objects.

To answer such questions, one should require first understanding the visual \
content, then based on the spatial information provided.

Here are some additional requirements about generated questions and answers:

1. In question, you must mention bounding box coordinates to refer to the \
object or regions, instead of directly say the object name or describing the \
regions in text. In answers, explain the region in the context of scene. \
Include details like object counts, position of the objects, relative \
position between the objects.

2. Don't ask the question you are not confident to answer. Only include \
question that have definite answer.

3. Do not mention that the information source is provided in \
text/caption/region description. Always answer as if you are directly \
looking at the image.

4. Don't mention additional coordinates in the answer.

5. Question should be explicitly ask about context/surrounding/nearby \
information/interaction.""",
}

REFINEMENT_SYSTEM_PROMPT = """\
You are an AI assistant reviewing a generated visual dialogue. The dialogue \
was produced under rules requiring every referenced object or region to \
carry bounding box coordinates as (x1, y1, x2, y2) floating numbers in \
[0, 1], definite answers only, and no mention of the underlying text \
annotations. Rewrite the dialogue so it fully follows those rules, keeping \
the content otherwise unchanged. Output only the revised dialogue."""


def render_scene_context(scene: SceneRecord) -> str:
    """Symbolic scene text in the block layout assistant prompts consume."""
    lines = ["Objects"]
    for i, obj in enumerate(scene.objects):
        coords = ", ".join(f"{v:.3f}" for v in obj.box)
        lines.append(f"Object {i}: {obj.name} at [{coords}].")
    lines.append("")
    lines.append("Relationships")
    for rel in scene.relationships:
        a = scene.objects[rel.object_index]
        b = scene.objects[rel.subject_index]
        lines.append(
            f"Object {rel.object_index} : {a.name} -> {rel.predicate} -> "
            f"Object {rel.subject_index} : {b.name}"
        )
    lines.append("")
    lines.append("Region Descriptions")
    for region in scene.region_descriptions:
        coords = ", ".join(f"{v:.3f}" for v in region.box)
        lines.append(f"Region Description at [{coords}] : {region.text}")
    lines.append("")
    lines.append("Global Caption")
    lines.extend(scene.captions)
    return "\n".join(lines)


def build_dialogue_prompt(
    scene: SceneRecord, kind: str = "conversation", few_shot=()
) -> list[dict]:
    """Chat messages for assistant-generated dialogue data.

    few_shot entries are (context, response) pairs inserted as prior turns.
    """
    if kind not in _DIALOGUE_SYSTEM_PROMPTS:
        raise ValueError(f"unknown dialogue kind {kind!r}")
    messages = [{"role": "system", "content": _DIALOGUE_SYSTEM_PROMPTS[kind]}]
    for context, response in few_shot:
        messages.append({"role": "user", "content": context})
        messages.append({"role": "assistant", "content": response})
    messages.append({"role": "user", "content": render_scene_context(scene)})
    return messages


def build_refinement_prompt(dialogue: str) -> list[dict]:
    """Second-pass messages asking the assistant to fix rule violations."""
    return [
        {"role": "system", "content": REFINEMENT_SYSTEM_PROMPT},
        {"role": "user", "content": dialogue},
    ]


# --- dialogue model clients ---


class StubLlmClient:
    """Canned client for tests: returns queued replies, then a fallback."""

    def __init__(self, replies=(), fallback: str = "[]"):
        self.replies = list(replies)
        self.fallback = fallback
        self.requests: list[str] = []

    def complete(self, prompt: str) -> str:
        self.requests.append(prompt)
        if self.replies:
            return self.replies.pop(0)
        return self.fallback


class HttpLlmClient:
    """Minimal request/response client against FERRET_LLM_ENDPOINT.

    POSTs {"prompt": ...} and expects {"text": ...}; retry count and timeout
    come from FERRET_LLM_RETRIES / FERRET_LLM_TIMEOUT.
    """

    def __init__(self, endpoint: str | None = None):
        self.endpoint = endpoint or os.environ.get("FERRET_LLM_ENDPOINT")
        if not self.endpoint:
            raise ValueError("FERRET_LLM_ENDPOINT is not set")
        self.retries = int(os.environ.get("FERRET_LLM_RETRIES", "2"))
        self.timeout = float(os.environ.get("FERRET_LLM_TIMEOUT", "30"))

    def complete(self, prompt: str) -> str:
        last_error = None
        for attempt in range(self.retries + 1):
            try:
                reply = requests.post(
                    self.endpoint, json={"prompt": prompt}, timeout=self.timeout
                )
                reply.raise_for_status()
                return reply.json()["text"]
            except (requests.RequestException, KeyError, ValueError) as exc:
                last_error = exc
                if attempt < self.retries:
                    time.sleep(min(2**attempt, 10))
        raise RuntimeError(f"dialogue endpoint failed: {last_error}")


# --- scene / sample JSON ---


def scene_from_json(obj: dict) -> SceneRecord:
    objects = tuple(
        SceneObject(str(o["name"]), tuple(float(v) for v in o["box"]), o.get("mask"))
        for o in obj.get("objects", [])
    )
    relationships = tuple(
        Relationship(int(r["object"]), str(r["predicate"]), int(r["subject"]))
        for r in obj.get("relationships", [])
    )
    regions = tuple(
        RegionDescription(tuple(float(v) for v in r["box"]), str(r["text"]))
        for r in obj.get("region_descriptions", [])
    )
    groundings = None
    if "caption_groundings" in obj:
        groundings = tuple(
            CaptionGrounding(
                int(g["caption"]),
                str(g["phrase"]),
                int(g["start"]),
                int(g["end"]),
                tuple(float(v) for v in g["box"]),
            )
            for g in obj["caption_groundings"]
        )
    return SceneRecord(
        image_id=str(obj["image_id"]),
        width=int(obj["width"]),
        height=int(obj["height"]),
        objects=objects,
        relationships=relationships,
        region_descriptions=regions,
        captions=tuple(str(c) for c in obj.get("captions", [])),
        caption_groundings=groundings,
    )


def scene_to_json(scene: SceneRecord) -> dict:
    out = {
        "image_id": scene.image_id,
        "width": scene.width,
        "height": scene.height,
        "objects": [
            {"name": o.name, "box": list(o.box), **({"mask": o.mask} if o.mask else {})}
            for o in scene.objects
        ],
        "relationships": [
            {"object": r.object_index, "predicate": r.predicate, "subject": r.subject_index}
            for r in scene.relationships
        ],
        "region_descriptions": [
            {"box": list(r.box), "text": r.text} for r in scene.region_descriptions
        ],
        "captions": list(scene.captions),
    }
    if scene.caption_groundings is not None:
        out["caption_groundings"] = [
            {
                "caption": g.caption_index,
                "phrase": g.phrase,
                "start": g.start,
                "end": g.end,
                "box": list(g.box),
            }
            for g in scene.caption_groundings
        ]
    return out
