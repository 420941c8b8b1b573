import os
import time
import logging
import threading
from abc import ABC, abstractmethod
from typing import NamedTuple, Optional, List, Sequence

import requests

from . import utils, files

logger = logging.getLogger(__name__)

API_KEY_ENV = "FREEMOTION_API_KEY"
TRANSCRIPT_FORMAT = "motion_synth-transcript-v1"


class BackendError(RuntimeError):
    pass


class ScriptMismatch(ValueError):
    pass


class ScriptExhausted(ValueError):
    pass


class AgentBackend(ABC):
    @abstractmethod
    def complete(self, prompt: str, image=None) -> str:
        """Returns the agent's reply to `prompt`, optionally with an (H, W, 3) image"""


class TranscriptRecord(NamedTuple):
    prompt_prefix: str
    reply: str


def read_transcript(path) -> List[TranscriptRecord]:
    data = files.read_json(path)
    if not isinstance(data, dict) or data.get('format') != TRANSCRIPT_FORMAT:
        raise files.FileFormatError(
            path, 1, 1, f"expected a {TRANSCRIPT_FORMAT!r} document")
    records = []
    for i, rec in enumerate(data.get('records', [])):
        try:
            records.append(TranscriptRecord(rec['prompt'], rec['reply']))
        except (KeyError, TypeError):
            raise files.FileFormatError(
                path, 1, 1, f"record {i} needs 'prompt' and 'reply'") from None
    return records


def write_transcript(path, records: Sequence[TranscriptRecord]):
    return files.write_json(path, {
        'format': TRANSCRIPT_FORMAT,
        'records': [{'prompt': r.prompt_prefix, 'reply': r.reply} for r in records],
    })


class ScriptedBackend(AgentBackend):
    """
    Replays a fixture transcript in order. Each prompt must start with the
    record's expected prefix once whitespace runs are collapsed.

    Single-session: one instance serves one pipeline run.
    """
    def __init__(self, records: Sequence[TranscriptRecord]):
        self.records = list(records)
        self.position = 0
        self._lock = threading.Lock()

    @classmethod
    def from_file(cls, path):
        return cls(read_transcript(path))

    @property
    def remaining(self):
        return len(self.records) - self.position

    def complete(self, prompt: str, image=None) -> str:
        with self._lock:
            if self.position >= len(self.records):
                raise ScriptExhausted(
                    f"fixture exhausted after {len(self.records)} replies; "
                    f"unexpected prompt: {utils.collapse_whitespace(prompt)[:80]!r}")
            record = self.records[self.position]
            expected = utils.collapse_whitespace(record.prompt_prefix)
            actual = utils.collapse_whitespace(prompt)
            if not actual.startswith(expected):
                raise ScriptMismatch(
                    f"record {self.position}: prompt does not start with "
                    f"{expected[:80]!r}, got {actual[:80]!r}")
            self.position += 1
            return record.reply


class RemoteBackend(AgentBackend):
    """Chat-completion client over HTTPS."""
    _default_headers = {
        "Accept": "application/json",
        "Content-Type": "application/json",
    }

    def __init__(
            self, endpoint, model, api_key=None, max_retries=2, backoff=1.0,
            timeout=120.0, session=None, sleep=time.sleep,
    ):
        self.endpoint = endpoint
        self.model = model
        self.api_key = api_key or os.environ.get(API_KEY_ENV)
        self.max_retries = max_retries
        self.backoff = backoff
        self.timeout = timeout
        self.session = session or requests.session()
        self.sleep = sleep
        self.transcript: List[dict] = []

    def prepare_headers(self, **kwargs):
        headers = self._default_headers.copy()
        if self.api_key:
            headers["Authorization"] = f"Bearer {self.api_key}"
        headers.update(kwargs)
        return headers

    @staticmethod
    def _redact(headers):
        return {
            k: ("Bearer ***" if k.lower() == "authorization" else v)
            for k, v in headers.items()
        }

    def payload(self, prompt, image=None):
        content = [{"type": "text", "text": prompt}]
        if image is not None:
            from .render import to_png_base64
            content.append({
                "type": "image_url",
                "image_url": {"url": "data:image/png;base64," + to_png_base64(image)},
            })
        return {
            "model": self.model,
            "messages": [{"role": "user", "content": content}],
        }

    def post(self, json=None, **kwargs):
        kwargs['headers'] = self.prepare_headers(**kwargs.get('headers', {}))
        entry = {'request': json, 'headers': self._redact(kwargs['headers'])}
        self.transcript.append(entry)
        r = self.session.post(self.endpoint, json=json, timeout=self.timeout, **kwargs)
        r.raise_for_status()
        entry['response'] = r.json()
        return entry['response']

    def complete(self, prompt: str, image=None) -> str:
        if not self.api_key:
            raise BackendError(f"no credential, set {API_KEY_ENV}")
        payload = self.payload(prompt, image)
        for attempt in range(self.max_retries + 1):
            try:
                response = self.post(json=payload)
                return response['choices'][0]['message']['content']
            except (requests.RequestException, KeyError, IndexError, ValueError) as err:
                logger.error(
                    "chat completion attempt %d/%d failed: %s",
                    attempt + 1, self.max_retries + 1, err)
                if attempt == self.max_retries:
                    raise BackendError(str(err)) from err
                self.sleep(self.backoff * 2 ** attempt)
