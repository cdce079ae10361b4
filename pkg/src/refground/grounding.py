"""Grounded-text parsing and the evaluation metric suite.

Model responses embed coordinates as bracketed bin groups right after the
phrase they ground, e.g. ``There is a dog [100, 150, 300, 200] in the
figure.`` The parser is lenient: anything that is not a well-formed
coordinate group stays in the raw text, and zero spans is a valid result.

Metrics aggregate integer counts across records and divide once at the end,
so concatenating record sets combines exactly by count.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field

from .geometry import Box, iou
from .quantizer import QuantizerConfig, dequantize_box

_GROUP_RE = re.compile(r"\[([^\[\]]*)\]")
_INT_RE = re.compile(r"\A\d+\Z")
_BOUNDARY_CHARS = ".,!?;:"
_MAX_PHRASE_TOKENS = 6

# Function words that terminate the noun-like token run attached to a
# coordinate group ("There is a dog [..]" grounds "a dog").
_PHRASE_BREAKERS = frozenset(
    "there here is are was were am be been being i you he she it we they "
    "and or also see".split()
)

_NOT_CLAUSE_RE = re.compile(r"\bnot\b[^,.]*", flags=re.IGNORECASE)


class RecordError(ValueError):
    """An evaluation record is malformed; carries the offending record id."""

    def __init__(self, record_id, message: str):
        super().__init__(f"record {record_id!r}: {message}")
        self.record_id = record_id


@dataclass(frozen=True)
class Span:
    """A grounded phrase: char range in the raw text plus coordinate groups.

    Groups have 2 ints (a point) or 4 ints (a box); `boxes` filters the
    4-int ones.
    """

    start: int
    end: int
    phrase: str
    groups: tuple[tuple[int, ...], ...]

    @property
    def boxes(self) -> tuple[tuple[int, int, int, int], ...]:
        return tuple(g for g in self.groups if len(g) == 4)


@dataclass(frozen=True)
class GroundedText:
    raw: str
    spans: tuple[Span, ...]

    def all_boxes(self) -> list[tuple[int, int, int, int]]:
        return [b for s in self.spans for b in s.boxes]


def _valid_group(content: str, n_bins: int) -> tuple[int, ...] | None:
    parts = [p.strip() for p in content.split(",")]
    if len(parts) not in (2, 4):
        return None
    if not all(_INT_RE.match(p) for p in parts):
        return None
    values = tuple(int(p) for p in parts)
    if any(not 0 <= v < n_bins for v in values):
        return None
    if len(values) == 4 and (values[0] > values[2] or values[1] > values[3]):
        return None
    return values


def _phrase_before(text: str, lo: int, hi: int) -> tuple[int, str]:
    """Noun-like token run in text[lo:hi]: tokens after the last sentence
    boundary and the last breaker word, capped at the trailing 6."""
    segment = text[lo:hi]
    cut = max([segment.rfind(ch) for ch in _BOUNDARY_CHARS] + [-1])
    tokens = [
        (m.start() + cut + 1, m.group())
        for m in re.finditer(r"\S+", segment[cut + 1 :])
    ]
    tokens = [t for t in tokens if any(c.isalnum() for c in t[1])]
    run: list[tuple[int, str]] = []
    for off, tok in tokens:
        if tok.lower().strip(_BOUNDARY_CHARS + "'\"") in _PHRASE_BREAKERS:
            run = []
        else:
            run.append((off, tok))
    run = run[-_MAX_PHRASE_TOKENS:]
    if not run:
        return hi, ""
    return lo + run[0][0], " ".join(tok for _, tok in run)


def parse_grounded_text(text: str, n_bins: int = 1000) -> GroundedText:
    """Extract grounded spans from arbitrary model output.

    Every maximal bracketed group of 2 or 4 comma-separated in-range
    integers becomes a coordinate group; a whitespace-separated run of
    groups attaches to the single phrase preceding the first one. Malformed
    brackets are ignored and stay in the raw text.
    """
    groups = []
    for m in _GROUP_RE.finditer(text):
        values = _valid_group(m.group(1), n_bins)
        if values is not None:
            groups.append((m.start(), m.end(), values))

    spans = []
    prev_end = 0
    i = 0
    while i < len(groups):
        j = i
        while (
            j + 1 < len(groups)
            and text[groups[j][1] : groups[j + 1][0]].strip() == ""
        ):
            j += 1
        run = groups[i : j + 1]
        phrase_start, phrase = _phrase_before(text, prev_end, run[0][0])
        spans.append(
            Span(
                start=min(phrase_start, run[0][0]),
                end=run[-1][1],
                phrase=phrase,
                groups=tuple(g[2] for g in run),
            )
        )
        prev_end = run[-1][1]
        i = j + 1
    return GroundedText(text, tuple(spans))


def strip_coordinate_groups(text: str, n_bins: int = 1000) -> str:
    """Remove parsed coordinate groups (plus one preceding space) from text."""
    cuts = []
    for m in _GROUP_RE.finditer(text):
        if _valid_group(m.group(1), n_bins) is not None:
            start = m.start()
            if start > 0 and text[start - 1] == " ":
                start -= 1
            cuts.append((start, m.end()))
    out = []
    pos = 0
    for a, b in cuts:
        out.append(text[pos:a])
        pos = b
    out.append(text[pos:])
    return "".join(out)


@dataclass(frozen=True)
class EvalRecord:
    """One evaluation sample: a prediction (text or label) plus ground truth."""

    id: str
    task: str
    text: str | None = None
    label: str | None = None
    gt: dict = field(default_factory=dict)

    _TASKS = (
        "rec",
        "phrase_grounding",
        "grounded_caption",
        "refer_cls",
        "pope",
        "bench",
    )

    def __post_init__(self):
        if self.task not in self._TASKS:
            raise RecordError(self.id, f"unknown task {self.task!r}")


def _gt_size(record: EvalRecord) -> tuple[int, int]:
    try:
        return int(record.gt["width"]), int(record.gt["height"])
    except KeyError as exc:
        raise RecordError(record.id, f"ground truth missing {exc}") from None


def _gt_box(obj, record: EvalRecord) -> Box:
    if not isinstance(obj, (list, tuple)) or len(obj) != 4:
        raise RecordError(record.id, f"bad ground-truth box {obj!r}")
    return Box(*(float(v) for v in obj))


def eval_rec(records, cfg: QuantizerConfig = QuantizerConfig()) -> dict:
    """Referring-expression accuracy: the first predicted box must exceed
    IoU 0.5 (strictly) against the single GT box; no box counts incorrect."""
    total = correct = no_prediction = 0
    for r in records:
        size = _gt_size(r)
        gt_box = _gt_box(r.gt.get("box"), r)
        total += 1
        boxes = parse_grounded_text(r.text or "", cfg.n_bins).all_boxes()
        if not boxes:
            no_prediction += 1
            continue
        pred = dequantize_box(boxes[0], size, cfg)
        if iou(pred, gt_box) > 0.5:
            correct += 1
    acc = correct / total if total else 0.0
    return {
        "task": "rec",
        "acc@0.5": acc,
        "counts": {"records": total, "correct": correct, "no_prediction": no_prediction},
    }


def _normalize_phrase(phrase: str) -> str:
    return " ".join(phrase.casefold().strip(" \t\n" + _BOUNDARY_CHARS).split())


def _phrase_matches(pred: str, gt: str) -> bool:
    if pred == gt:
        return True
    if not pred or not gt:
        return False
    return re.search(rf"\b{re.escape(gt)}\b", pred) is not None or (
        re.search(rf"\b{re.escape(pred)}\b", gt) is not None
    )


def eval_phrase_grounding(records, cfg: QuantizerConfig = QuantizerConfig()) -> dict:
    """Per-phrase accuracy with merged candidates: a GT phrase is correct if
    any box predicted for it exceeds IoU 0.5 with any of its GT boxes."""
    total = correct = 0
    n_records = 0
    for r in records:
        size = _gt_size(r)
        phrases = r.gt.get("phrases")
        if not isinstance(phrases, list):
            raise RecordError(r.id, "ground truth missing 'phrases' list")
        n_records += 1
        parsed = parse_grounded_text(r.text or "", cfg.n_bins)
        spans = [(_normalize_phrase(s.phrase), s.boxes) for s in parsed.spans]
        for entry in phrases:
            gt_phrase = _normalize_phrase(str(entry.get("phrase", "")))
            gt_boxes = [_gt_box(b, r) for b in entry.get("boxes", [])]
            total += 1
            pred_boxes = [
                box
                for phrase, boxes in spans
                if _phrase_matches(phrase, gt_phrase)
                for box in boxes
            ]
            hit = any(
                iou(dequantize_box(pb, size, cfg), gb) > 0.5
                for pb in pred_boxes
                for gb in gt_boxes
            )
            if hit:
                correct += 1
    acc = correct / total if total else 0.0
    return {
        "task": "phrase_grounding",
        "acc@0.5": acc,
        "counts": {"records": n_records, "phrases": total, "correct": correct},
    }


def _f1(precision: float, recall: float) -> float:
    if precision + recall == 0.0:
        return 0.0
    return 2 * precision * recall / (precision + recall)


def eval_grounded_caption(
    records, cfg: QuantizerConfig = QuantizerConfig()
) -> tuple[dict, list[dict]]:
    """Grounding F1 for captions plus the caption texts for external scorers.

    A predicted (word, box) pair is a true positive iff the word equals a GT
    object word (case-folded) and the box exceeds IoU 0.5 with one of that
    word's GT boxes. The overall F1 scores precision over all predicted
    pairs and recall over all GT pairs; the localization F1 restricts both
    denominators to word-matched pairs.
    """
    n_pred = n_gt = tp_pred = tp_gt = 0
    n_pred_matched = n_gt_matched = 0
    captions = []
    for r in records:
        size = _gt_size(r)
        gt_pairs = r.gt.get("pairs")
        if not isinstance(gt_pairs, list):
            raise RecordError(r.id, "ground truth missing 'pairs' list")
        gt_entries = []
        for entry in gt_pairs:
            word = _normalize_phrase(str(entry.get("word", "")))
            boxes = [_gt_box(b, r) for b in entry.get("boxes", [])]
            gt_entries.append((word, boxes))
        gt_words = {w for w, _ in gt_entries}

        parsed = parse_grounded_text(r.text or "", cfg.n_bins)
        pred_pairs = [
            (_normalize_phrase(s.phrase), dequantize_box(b, size, cfg))
            for s in parsed.spans
            for b in s.boxes
        ]
        pred_words = {w for w, _ in pred_pairs}
        captions.append(
            {"id": r.id, "caption": strip_coordinate_groups(r.text or "", cfg.n_bins)}
        )

        n_pred += len(pred_pairs)
        n_gt += len(gt_entries)
        for word, box in pred_pairs:
            matched = word in gt_words
            n_pred_matched += matched
            if matched and any(
                iou(box, gb) > 0.5
                for w, gbs in gt_entries
                if w == word
                for gb in gbs
            ):
                tp_pred += 1
        for word, gbs in gt_entries:
            matched = word in pred_words
            n_gt_matched += matched
            if matched and any(
                iou(pb, gb) > 0.5
                for w, pb in pred_pairs
                if w == word
                for gb in gbs
            ):
                tp_gt += 1

    p_all = tp_pred / n_pred if n_pred else 0.0
    r_all = tp_gt / n_gt if n_gt else 0.0
    p_loc = tp_pred / n_pred_matched if n_pred_matched else 0.0
    r_loc = tp_gt / n_gt_matched if n_gt_matched else 0.0
    report = {
        "task": "grounded_caption",
        "f1_all": _f1(p_all, r_all),
        "f1_loc": _f1(p_loc, r_loc),
        "precision_all": p_all,
        "recall_all": r_all,
        "precision_loc": p_loc,
        "recall_loc": r_loc,
        "counts": {
            "pred_pairs": n_pred,
            "gt_pairs": n_gt,
            "tp_pred": tp_pred,
            "tp_gt": tp_gt,
            "pred_word_matched": n_pred_matched,
            "gt_word_matched": n_gt_matched,
        },
    }
    return report, captions


def match_refer_answer(response: str, gt_class: str, neg_class: str) -> bool:
    """Detect the GT class after neutralizing negated mentions.

    Every stretch from a standalone "not" up to (excluding) the next comma
    or period is removed, then the GT class must occur on a word boundary,
    case-insensitively. The negative class only matters through the
    deletion: "dog, not cat" keeps "dog" detectable and hides "cat".
    """
    remainder = _NOT_CLAUSE_RE.sub("", response)
    if not gt_class:
        return False
    return re.search(rf"\b{re.escape(gt_class)}\b", remainder, re.IGNORECASE) is not None


def eval_refer(records) -> dict:
    """Accuracy of referring object classification over binary-choice answers."""
    total = correct = 0
    for r in records:
        gt_class = r.gt.get("gt_class")
        if not gt_class:
            raise RecordError(r.id, "ground truth missing 'gt_class'")
        total += 1
        if match_refer_answer(r.text or "", gt_class, r.gt.get("neg_class", "")):
            correct += 1
    acc = correct / total if total else 0.0
    return {
        "task": "refer_cls",
        "accuracy": acc,
        "counts": {"records": total, "correct": correct},
    }


def parse_yes_no(text: str) -> str | None:
    """Lenient yes/no reading: leading token first, contained word second."""
    tokens = text.split()
    if tokens:
        head = tokens[0].strip(_BOUNDARY_CHARS + "'\"").casefold()
        if head in ("yes", "no"):
            return head
    has_yes = re.search(r"\byes\b", text, re.IGNORECASE) is not None
    has_no = re.search(r"\bno\b", text, re.IGNORECASE) is not None
    if has_yes != has_no:
        return "yes" if has_yes else "no"
    return None


def eval_pope(records) -> dict:
    """Binary object-existence metrics with "yes" as the positive class."""
    tp = fp = fn = tn = unparsed = 0
    for r in records:
        answer = str(r.gt.get("answer", "")).strip().casefold()
        if answer not in ("yes", "no"):
            raise RecordError(r.id, f"ground-truth answer must be yes/no, got {answer!r}")
        pred = parse_yes_no(r.text or "")
        if pred is None:
            unparsed += 1
            pred = "no"
        if pred == "yes":
            if answer == "yes":
                tp += 1
            else:
                fp += 1
        else:
            if answer == "yes":
                fn += 1
            else:
                tn += 1
    total = tp + fp + fn + tn
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    return {
        "task": "pope",
        "accuracy": (tp + tn) / total if total else 0.0,
        "precision": precision,
        "recall": recall,
        "f1": _f1(precision, recall),
        "yes_ratio": (tp + fp) / total if total else 0.0,
        "counts": {
            "records": total,
            "tp": tp,
            "fp": fp,
            "fn": fn,
            "tn": tn,
            "unparsed": unparsed,
        },
    }


def bench_ratio(pred_scores, judge_scores) -> float:
    """Judge-relative quality: 100 * sum(pred) / sum(judge), scores in [1, 10]."""
    pred = list(pred_scores)
    judge = list(judge_scores)
    if len(pred) != len(judge):
        raise ValueError(f"score lists differ in length: {len(pred)} vs {len(judge)}")
    if not pred:
        raise ValueError("no scores to aggregate")
    for s in pred + judge:
        if not 1.0 <= float(s) <= 10.0:
            raise ValueError(f"score {s} outside [1, 10]")
    return 100.0 * sum(pred) / sum(judge)
