"""Text-LM oracle backends for the data pipelines.

All backends share one call signature, ``oracle(prompt, max_tokens, stop)``,
and record every exchange in ``oracle.transcript`` so that any run can be
replayed byte-for-byte with :class:`ReplayOracle`.

The prompt texts below are written for this package (the source pipelines do
not publish theirs). :class:`StubOracle` understands exactly these prompts and
answers them with simple deterministic string rules.
"""
from __future__ import annotations

import hashlib
import json
import random
import re
import urllib.error
import urllib.request
from dataclasses import dataclass
from pathlib import Path

# Prompt wording is our own; the stub oracle parses these exact templates back.
PROMPTS = {
    "answers": "Caption: {caption}\nList single-word answers that a question about this caption could have, "
               "separated by commas.\nAnswers:",
    "question": "Caption: {caption}\nWrite a question about the caption whose answer is \"{answer}\".\nQuestion:",
    "answer": "Caption: {caption}\nAnswer the question with one word.\nQuestion: {question}\nAnswer:",
    "strip_color": "Rewrite the following sentence without mentioning any colors.\nSentence: {caption}\nRewritten:",
    "properties": "Caption: {caption}\nThink step by step and list the properties of what is described, "
                  "separated by commas.\nProperties:",
    "pair": "{examples}### Task\nFirst: {caption_a}\nSecond: {caption_b}\nProperties of first: {properties}\n"
            "Write a question that exactly one of the two inputs answers, then the answer (first or second) "
            "and a short explanation, separated by \" | \".\nOutput:",
    "pair_answer": "First: {caption_a}\nSecond: {caption_b}\nQuestion: {question}\nAnswer with first or second.\n"
                   "Answer:",
}

# in-context examples for the pair prompt
PAIR_EXAMPLES = (
    ("a dog barks loudly at night", "a quiet library with wooden shelves", "dog, barks, loud, night",
     "Which one is louder? | first | A barking dog is louder than a quiet library."),
    ("a small kitten sleeping", "a large elephant walking", "small, kitten, sleeping",
     "Which one is bigger? | second | An elephant is larger than a kitten."),
    ("rain falling on a metal roof", "a candle burning in a room", "rain, falling, metal, roof",
     "Which one involves water? | first | Rain is water; a candle is not."),
)

STOPWORDS = frozenset(
    "a an the of on in at to and or with while is are was were be been by for from into onto over under "
    "this that these those it its his her their there here as some any very near next".split())


class OracleError(RuntimeError):
    pass


def render(kind: str, **fields) -> str:
    if kind == "pair" and "examples" not in fields:
        fields["examples"] = "".join(
            f"### Example\nFirst: {a}\nSecond: {b}\nProperties of first: {p}\nOutput: {o}\n"
            for a, b, p, o in PAIR_EXAMPLES)
    return PROMPTS[kind].format(**fields)


_FIELD = re.compile(r"^(Caption|Sentence|Question|First|Second|Properties of first): (.*)$", re.M)


def parse_prompt(prompt: str) -> tuple[str | None, dict]:
    """Identify which of :data:`PROMPTS` produced ``prompt`` and pull out its fields."""
    body = prompt.rsplit("### Task\n", 1)[-1]
    found = {}
    for key, val in _FIELD.findall(body):
        found[key] = val
    f = {}
    if "Caption" in found:
        f["caption"] = found["Caption"]
    if "Sentence" in found:
        f["caption"] = found["Sentence"]
    if "Question" in found:
        f["question"] = found["Question"]
    if "First" in found:
        f["caption_a"], f["caption_b"] = found["First"], found.get("Second", "")
    if "Properties of first" in found:
        f["properties"] = found["Properties of first"]
    m = re.search(r'whose answer is "(.*)"', body)
    if m:
        f["answer"] = m.group(1)
    for kind in ("pair", "pair_answer", "strip_color", "properties", "question", "answer", "answers"):
        tail = PROMPTS[kind].rsplit("\n", 1)[-1]
        if body.endswith(tail) and _matches(kind, body):
            return kind, f
    return None, f


def _matches(kind: str, body: str) -> bool:
    markers = {"answers": "List single-word answers", "question": "Write a question about the caption",
               "answer": "Answer the question with one word", "strip_color": "without mentioning any colors",
               "properties": "list the properties", "pair": "exactly one of the two inputs",
               "pair_answer": "Answer with first or second"}
    return markers[kind] in body


def words(text: str) -> list[str]:
    return re.findall(r"[a-z0-9']+", text.lower())


def content_words(text: str) -> list[str]:
    out = []
    for w in words(text):
        if len(w) >= 3 and w not in STOPWORDS and w not in out:
            out.append(w)
    return out


def _postprocess(text: str, max_tokens: int, stop) -> str:
    for s in stop or ():
        if s and s in text:
            text = text[:text.index(s)]
    toks = text.split()
    if len(toks) > max_tokens:
        text = " ".join(toks[:max_tokens])
    return text.strip()


@dataclass
class Exchange:
    prompt: str
    max_tokens: int
    stop: list
    text: str

    def to_json(self) -> dict:
        return {"prompt": self.prompt, "max_tokens": self.max_tokens, "stop": list(self.stop), "text": self.text}


class LMOracle:
    backend = "base"

    def __init__(self):
        self.transcript: list[Exchange] = []

    def __call__(self, prompt: str, max_tokens: int = 64, stop=None) -> str:
        stop = list(stop or [])
        text = _postprocess(self._complete(prompt, max_tokens, stop), max_tokens, stop)
        self.transcript.append(Exchange(prompt, max_tokens, stop, text))
        return text

    def _complete(self, prompt: str, max_tokens: int, stop: list) -> str:
        raise NotImplementedError

    def settings(self) -> dict:
        return {"backend": self.backend}

    def save_transcript(self, path) -> None:
        save_transcript(path, self.transcript, self.settings())


def save_transcript(path, exchanges, settings: dict | None = None) -> None:
    """JSONL; an optional first line ``{"oracle": settings}`` records the backend that produced it."""
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    lines = [json.dumps({"oracle": settings}, ensure_ascii=False)] if settings is not None else []
    lines += [json.dumps(e.to_json(), ensure_ascii=False) for e in exchanges]
    Path(path).write_text("".join(l + "\n" for l in lines), encoding="utf-8")


def read_transcript(path) -> tuple[dict | None, list[Exchange]]:
    settings, out = None, []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if not line.strip():
            continue
        d = json.loads(line)
        if "oracle" in d:
            settings = d["oracle"]
            continue
        out.append(Exchange(d["prompt"], d["max_tokens"], d["stop"], d["text"]))
    return settings, out


def load_transcript(path) -> list[Exchange]:
    return read_transcript(path)[1]


class StubOracle(LMOracle):
    """Deterministic rule-based oracle; a pure function of (prompt, seed)."""

    backend = "stub"
    COLORS = frozenset("red blue green yellow orange purple pink brown black white gray grey silver gold "
                       "golden beige violet cyan magenta turquoise maroon navy teal".split())

    def __init__(self, seed: int = 0, max_answers: int = 3):
        super().__init__()
        self.seed = seed
        self.max_answers = max_answers

    def settings(self) -> dict:
        return {"backend": self.backend, "seed": self.seed, "decoding": "greedy"}

    def _rng(self, prompt: str) -> random.Random:
        h = hashlib.sha256(f"{self.seed}\x00{prompt}".encode()).digest()
        return random.Random(int.from_bytes(h[:8], "little"))

    def _complete(self, prompt, max_tokens, stop):
        kind, f = parse_prompt(prompt)
        rng = self._rng(prompt)
        if kind == "answers":
            cands = content_words(f["caption"])
            if len(cands) > self.max_answers:
                keep = set(rng.sample(range(len(cands)), self.max_answers))
                cands = [c for i, c in enumerate(cands) if i in keep]
            return ", ".join(cands)
        if kind == "question":
            return self.ask(f["caption"], f["answer"])
        if kind == "answer":
            return self.answer(f["caption"], f["question"])
        if kind == "strip_color":
            return self.strip(f["caption"])
        if kind == "properties":
            return ", ".join(content_words(f["caption"]))
        if kind == "pair":
            return self.pair(f["caption_a"], f["caption_b"], rng)
        if kind == "pair_answer":
            return self.pair_answer(f["caption_a"], f["caption_b"], f["question"])
        return ""

    @staticmethod
    def ask(caption: str, answer: str) -> str:
        toks = words(caption)
        a = answer.lower()
        if a not in toks:
            return "What is shown?"
        i = toks.index(a)
        q = toks[:i] + ["what"] + toks[i + 1:]
        return q[0].capitalize() + " " + " ".join(q[1:]) + "?" if len(q) > 1 else "What?"

    @staticmethod
    def answer(caption: str, question: str) -> str:
        toks, q = words(caption), words(question)
        if "what" not in q:
            return "unknown"
        i = q.index("what")
        pre, post = q[:i], q[i + 1:]
        for j in range(len(toks)):
            if toks[max(0, j - len(pre)):j] == pre and toks[j + 1:j + 1 + len(post)] == post:
                return toks[j]
        return "unknown"

    def strip(self, caption: str) -> str:
        kept = [w for w in caption.split() if re.sub(r"[^a-z]", "", w.lower()) not in self.COLORS]
        return " ".join(kept)

    @staticmethod
    def pair(a: str, b: str, rng: random.Random) -> str:
        wa, wb = content_words(a), content_words(b)
        only_a = [w for w in wa if w not in wb]
        only_b = [w for w in wb if w not in wa]
        options = [(0, w) for w in only_a] + [(1, w) for w in only_b]
        if not options:
            return "none"
        side, w = options[rng.randrange(len(options))]
        name = ("first", "second")[side]
        return f"Which one involves {w}? | {name} | Only the {name} input mentions {w}."

    @staticmethod
    def pair_answer(a: str, b: str, question: str) -> str:
        q = words(question)
        target = q[-1] if q else ""
        in_a, in_b = target in words(a), target in words(b)
        if in_a and not in_b:
            return "first"
        if in_b and not in_a:
            return "second"
        return "unsure"


class ScriptedOracle(LMOracle):
    """Answers from a script, falling back to another oracle.

    ``script`` is a mapping from exact prompt to text, or a callable
    ``(kind, fields, prompt) -> text | None``.
    """

    backend = "scripted"

    def __init__(self, script, fallback: LMOracle | None = None):
        super().__init__()
        self.script = script
        self.fallback = fallback or StubOracle()

    def _complete(self, prompt, max_tokens, stop):
        if callable(self.script):
            kind, f = parse_prompt(prompt)
            out = self.script(kind, f, prompt)
        else:
            out = self.script.get(prompt)
        if out is None:
            return self.fallback._complete(prompt, max_tokens, stop)
        if isinstance(out, Exception):
            raise out
        return out


class RemoteOracle(LMOracle):
    """HTTP backend: POST {prompt, max_tokens, stop} as JSON, expects {text}."""

    backend = "remote"

    def __init__(self, endpoint: str, timeout: float = 60.0):
        super().__init__()
        self.endpoint = endpoint
        self.timeout = timeout

    def settings(self) -> dict:
        return {"backend": self.backend, "endpoint": self.endpoint, "timeout": self.timeout}

    def _complete(self, prompt, max_tokens, stop):
        body = json.dumps({"prompt": prompt, "max_tokens": max_tokens, "stop": stop}).encode()
        req = urllib.request.Request(self.endpoint, data=body, headers={"Content-Type": "application/json"})
        try:
            with urllib.request.urlopen(req, timeout=self.timeout) as resp:
                payload = json.loads(resp.read().decode("utf-8"))
        except (urllib.error.URLError, OSError, ValueError) as e:
            raise OracleError(f"oracle endpoint {self.endpoint} failed: {e}") from e
        if not isinstance(payload, dict) or not isinstance(payload.get("text"), str):
            raise OracleError(f"oracle endpoint {self.endpoint} returned no text field")
        return payload["text"]


class ReplayOracle(LMOracle):
    """Serves recorded responses in order; any divergence from the recording is an error."""

    backend = "replay"

    def __init__(self, exchanges, settings: dict | None = None):
        super().__init__()
        if not isinstance(exchanges, list):
            settings, exchanges = read_transcript(exchanges)
        self.exchanges = exchanges
        self.recorded_settings = settings
        self.pos = 0

    def settings(self) -> dict:
        # report the recorded backend so replayed provenance matches the original run
        return dict(self.recorded_settings) if self.recorded_settings else {"backend": self.backend}

    def _complete(self, prompt, max_tokens, stop):
        if self.pos >= len(self.exchanges):
            raise OracleError("replay transcript exhausted")
        e = self.exchanges[self.pos]
        if (e.prompt, e.max_tokens, list(e.stop)) != (prompt, max_tokens, list(stop)):
            raise OracleError(f"replay mismatch at exchange {self.pos}")
        self.pos += 1
        return e.text


def make_oracle(endpoint: str | None = None, replay: str | None = None, seed: int = 0) -> LMOracle:
    if replay:
        return ReplayOracle(replay)
    if endpoint:
        return RemoteOracle(endpoint)
    return StubOracle(seed=seed)
