"""Annotation curation: keep single-action clips and re-caption them.

The classifier counts how many actions an annotation describes. Records with
more than one action are eliminated; single-action records are re-captioned
with the fixed "<Subject> <action> <object>, Action is ..., Object is ..."
template. Two classifiers are provided: a remote chat-completion endpoint and
an offline verb-lexicon oracle.
"""

from __future__ import annotations

import json
import logging
import os
import re
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Protocol

from .synth_data import format_caption

log = logging.getLogger(__name__)

QUESTION = ("Please identify how many actions are described in the following text, "
            "along with the relevant verbs and objects.")
JSON_SUFFIX = ('Respond with only a JSON object of the form '
               '{"action_count": <int>, "subject": <string>, "verbs": [<string>], "objects": [<string>]}.')
CAPTION_RE = re.compile(r"^([A-Z][a-z]*) ([a-z]+) ([a-z]+), Action is \2, Object is \3$")

ENV_URL = "ACTCLIP_CLASSIFIER_URL"
ENV_KEY = "ACTCLIP_CLASSIFIER_KEY"
ENV_MODEL = "ACTCLIP_CLASSIFIER_MODEL"

# scale of the processed RH20T corpus the pipeline was designed for
RH20T_REFERENCE = {
    "total_videos": 199_797,
    "unique_tasks": 143,
    "distinct_atomic_actions": 52,
    "total_frames": 63_922_209,
}

VERBS = frozenset("""
    grasp grab pick place put release drop open close push pull slide turn rotate twist
    lift lower raise press wipe insert remove pour stir shake flip fold unfold hang
    move tilt plug unplug stack unstack scoop cut throw hold carry
""".split())

# suffix -> replacement, tried in order; a candidate is accepted only if it is a known verb
SUFFIXES = (
    ("", ""),
    ("ies", "y"),
    ("es", ""),
    ("s", ""),
    ("ing", ""),
    ("ing", "e"),
    ("ed", ""),
    ("ed", "e"),
    ("d", ""),
)
IRREGULAR = {"put": "put", "held": "hold", "threw": "throw", "cutting": "cut",
             "putting": "put", "dropped": "drop", "dropping": "drop", "grabbed": "grab",
             "grabbing": "grab", "lifted": "lift", "flipped": "flip", "flipping": "flip",
             "plugged": "plug", "unplugged": "unplug", "plugging": "plug"}

STOP = frozenset("the a an it its this that these those some up down on off out over back "
                 "of to into onto in from with by at for".split())
BREAK = frozenset("and then while after before , . ; : which".split())
SUBJECTS = {"robot": "robot", "arm": "robot", "gripper": "robot", "robotic": "robot",
            "human": "human", "person": "human", "hand": "human", "user": "human",
            "man": "human", "woman": "human"}


class InvalidAnnotationError(ValueError):
    pass


class ClassifierUnavailableError(RuntimeError):
    pass


class ManifestParseError(ValueError):
    def __init__(self, lineno: int, message: str):
        super().__init__(f"line {lineno}: {message}")
        self.lineno = lineno


@dataclass
class Analysis:
    action_count: int
    verbs: list[str]
    objects: list[str]
    subject: str = "robot"


@dataclass
class AnnotationRecord:
    video_id: str
    raw_text: str
    num_frames: int = 0
    verdict: str = "pending"
    analysis: Analysis | None = None
    generated_caption: str | None = None
    error: str | None = None
    extra: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        row = dict(self.extra)
        row.update(video_id=self.video_id, raw_text=self.raw_text, num_frames=self.num_frames,
                   verdict=self.verdict)
        if self.analysis is not None:
            row["action_count"] = self.analysis.action_count
            row["analysis"] = asdict(self.analysis)
        if self.generated_caption is not None:
            a = self.analysis
            row.update(caption=self.generated_caption, subject=a.subject, action=a.verbs[0], object=a.objects[0])
        if self.error is not None:
            row["error"] = self.error
        return row

    @classmethod
    def from_json(cls, row: dict) -> "AnnotationRecord":
        known = {"video_id", "raw_text", "num_frames", "verdict", "action_count", "analysis",
                 "caption", "subject", "action", "object", "error"}
        analysis = Analysis(**row["analysis"]) if row.get("analysis") else None
        verdict = row.get("verdict", "pending")
        return cls(
            video_id=row["video_id"],
            raw_text=row.get("raw_text", row.get("caption", "")),
            num_frames=int(row.get("num_frames", 0)),
            verdict=verdict,
            analysis=analysis,
            generated_caption=row.get("caption") if verdict == "kept" else None,
            error=row.get("error"),
            extra={k: v for k, v in row.items() if k not in known},
        )


@dataclass
class DatasetSummary:
    total_videos: int = 0
    unique_tasks: int = 0
    distinct_atomic_actions: int = 0
    total_frames: int = 0

    def table(self) -> str:
        rows = [("Total Videos", self.total_videos), ("Unique Tasks", self.unique_tasks),
                ("Distinct Atomic Actions", self.distinct_atomic_actions), ("Total Frames", self.total_frames)]
        lines = ["# unique tasks = distinct (action, object) pairs over kept records",
                 f"{'Item':<24} {'Count':>12}"]
        lines += [f"{name:<24} {value:>12,}" for name, value in rows]
        return "\n".join(lines)


class AnnotationClassifier(Protocol):
    def classify(self, text: str) -> Analysis: ...


# -- offline oracle ------------------------------------------------------------

def tokenize(text: str) -> list[str]:
    return re.findall(r"[a-z]+|[,.;:]", text.lower())


def lemmatize_verb(word: str) -> str | None:
    if word in IRREGULAR:
        return IRREGULAR[word]
    for suffix, repl in SUFFIXES:
        if suffix and not word.endswith(suffix):
            continue
        stem = word[: len(word) - len(suffix)] + repl if suffix else word
        if stem in VERBS:
            return stem
    return None


def singular(noun: str) -> str:
    if noun.endswith("ies") and len(noun) > 4:
        return noun[:-3] + "y"
    if noun.endswith(("ches", "shes", "xes", "sses")):
        return noun[:-2]
    if noun.endswith("s") and not noun.endswith("ss") and len(noun) > 3:
        return noun[:-1]
    return noun


class OfflineOracle:
    """Counts distinct manipulation verbs from the shipped lexicon."""

    def classify(self, text: str) -> Analysis:
        tokens = tokenize(text)
        if not [t for t in tokens if t.isalpha()]:
            raise InvalidAnnotationError("annotation is empty")
        verbs: list[str] = []
        objects: list[str] = []
        subject = "robot"
        subject_found = False
        i = 0
        while i < len(tokens):
            tok = tokens[i]
            lemma = lemmatize_verb(tok)
            if lemma is None:
                if not subject_found and tok in SUBJECTS:
                    subject, subject_found = SUBJECTS[tok], True
                i += 1
                continue
            if lemma not in verbs:
                verbs.append(lemma)
            phrase = []
            j = i + 1
            while j < len(tokens) and tokens[j] not in BREAK and lemmatize_verb(tokens[j]) is None:
                if tokens[j] in STOP:
                    if phrase:
                        break
                else:
                    phrase.append(tokens[j])
                j += 1
            if phrase:
                noun = singular(phrase[-1])
                if noun not in objects:
                    objects.append(noun)
            i = j
        return Analysis(len(verbs), verbs, objects, subject)


# -- remote classifier -----------------------------------------------------------

def build_prompt(text: str) -> str:
    return f"{QUESTION}\n\n{text}\n\n{JSON_SUFFIX}"


def parse_response(content: str) -> Analysis:
    match = re.search(r"\{.*\}", content, re.DOTALL)
    if match is None:
        raise ValueError("classifier response holds no JSON object")
    data = json.loads(match.group(0))
    verbs = [str(v).strip().lower() for v in data.get("verbs", [])]
    verbs = [lemmatize_verb(v) or v for v in verbs]
    objects = [singular(str(o).strip().lower().split()[-1]) for o in data.get("objects", []) if str(o).strip()]
    subject = SUBJECTS.get(str(data.get("subject", "robot")).strip().lower(), "robot")
    return Analysis(int(data["action_count"]), verbs, objects, subject)


class RemoteClassifier:
    """Chat-completion endpoint client: POST {model, messages}, read choices[0].message.content."""

    def __init__(self, url: str, api_key: str | None = None, model: str = "deepseek-reasoner",
                 attempts: int = 3, backoff: float = 1.0, timeout: float = 60.0,
                 transport=None, sleep: Callable[[float], None] = time.sleep):
        import httpx

        headers = {"Authorization": f"Bearer {api_key}"} if api_key else {}
        self.url = url
        self.model = model
        self.attempts = attempts
        self.backoff = backoff
        self.sleep = sleep
        self.client = httpx.Client(headers=headers, timeout=timeout, transport=transport)

    @classmethod
    def from_env(cls, **kwargs) -> "RemoteClassifier":
        url = os.environ.get(ENV_URL)
        if not url:
            raise ClassifierUnavailableError(f"{ENV_URL} is not set")
        return cls(url, os.environ.get(ENV_KEY), os.environ.get(ENV_MODEL, "deepseek-reasoner"), **kwargs)

    def classify(self, text: str) -> Analysis:
        if not text.strip():
            raise InvalidAnnotationError("annotation is empty")
        body = {"model": self.model, "messages": [{"role": "user", "content": build_prompt(text)}]}
        last = None
        for attempt in range(self.attempts):
            try:
                resp = self.client.post(self.url, json=body)
                resp.raise_for_status()
                return parse_response(resp.json()["choices"][0]["message"]["content"])
            except Exception as exc:  # network, HTTP status, or unparseable reply
                last = exc
                log.warning("classifier attempt %d/%d failed: %s", attempt + 1, self.attempts, exc)
                if attempt + 1 < self.attempts:
                    self.sleep(self.backoff * 2 ** attempt)
        raise ClassifierUnavailableError(f"classifier failed after {self.attempts} attempts: {last}")


def classify_annotation(raw_text: str, client: AnnotationClassifier) -> Analysis:
    if not raw_text or not raw_text.strip():
        raise InvalidAnnotationError("annotation is empty")
    return client.classify(raw_text.strip())


# -- pipeline ------------------------------------------------------------------

def _curate_one(record: AnnotationRecord, client: AnnotationClassifier) -> AnnotationRecord:
    if record.verdict in ("kept", "eliminated"):
        return record
    out = AnnotationRecord(record.video_id, record.raw_text, record.num_frames, extra=dict(record.extra))
    try:
        analysis = classify_annotation(record.raw_text, client)
    except ClassifierUnavailableError as exc:
        out.error = str(exc)
        return out
    except (InvalidAnnotationError, ValueError) as exc:
        out.verdict, out.error = "eliminated", f"analysis failed: {exc}"
        return out
    out.analysis = analysis
    if analysis.action_count == 1 and analysis.verbs and analysis.objects:
        out.verdict = "kept"
        out.generated_caption = format_caption(analysis.subject, analysis.verbs[0], analysis.objects[0])
    else:
        out.verdict = "eliminated"
        if analysis.action_count == 1:
            out.error = "analysis failed: no verb/object extracted"
    return out


def filter_and_reannotate(records: Iterable[AnnotationRecord], client: AnnotationClassifier,
                          concurrency: int = 1) -> list[AnnotationRecord]:
    records = list(records)
    if concurrency > 1:
        with ThreadPoolExecutor(concurrency) as pool:
            out = list(pool.map(lambda r: _curate_one(r, client), records))
    else:
        out = [_curate_one(r, client) for r in records]
    return sorted(out, key=lambda r: r.video_id)


def read_annotations(path: Path) -> list[AnnotationRecord]:
    return [AnnotationRecord.from_json(row) for row in read_jsonl(path)]


def write_annotations(records: Iterable[AnnotationRecord], path: Path) -> None:
    Path(path).write_text("".join(json.dumps(r.to_json()) + "\n" for r in records))


def iter_jsonl(path: Path):
    """Yields (line number, record) pairs, skipping blank lines."""
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                row = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ManifestParseError(lineno, exc.msg) from None
            if not isinstance(row, dict):
                raise ManifestParseError(lineno, "record is not a JSON object")
            yield lineno, row


def read_jsonl(path: Path) -> list[dict]:
    return [row for _, row in iter_jsonl(path)]


def summarize(rows: Iterable[dict]) -> DatasetSummary:
    """Counts over kept records; rows without a verdict count as kept."""
    kept = [r for r in rows if r.get("verdict", "kept") == "kept"]
    return DatasetSummary(
        total_videos=len(kept),
        unique_tasks=len({(r["action"], r["object"]) for r in kept}),
        distinct_atomic_actions=len({r["action"] for r in kept}),
        total_frames=sum(int(r.get("num_frames", 0)) for r in kept),
    )


def summarize_file(path: Path) -> DatasetSummary:
    rows = []
    for lineno, row in iter_jsonl(path):
        if row.get("verdict", "kept") == "kept" and not {"action", "object"} <= row.keys():
            raise ManifestParseError(lineno, "kept record lacks action/object")
        rows.append(row)
    return summarize(rows)


def parse_caption(caption: str) -> tuple[str, str, str]:
    """Recover (subject, action, object) names from a generated caption."""
    analysis = OfflineOracle().classify(caption)
    if analysis.action_count != 1 or not analysis.objects:
        raise InvalidAnnotationError(f"caption does not describe one action: {caption!r}")
    subject = caption.split(maxsplit=1)[0].lower()
    return subject, analysis.verbs[0], analysis.objects[0]
