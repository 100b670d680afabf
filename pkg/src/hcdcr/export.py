"""Training files for external fine-tuning of a pair scorer."""
from __future__ import annotations

import json
from pathlib import Path
from typing import Mapping, Sequence

from .corpus import Topic
from .scoring import (SerializationError, enumerate_pairs, gold_relation, pair_input,
                      serialize_chatml, serialize_marker_format)


def export_training_data(topics: Sequence[Topic], path, format: str = "chatml",
                         definitions: Mapping[str, Mapping[str, str]] | None = None,
                         system: str | None = None) -> Path:
    """Write one JSONL record per canonical pair: serialized input plus gold class code.

    ``definitions`` maps topic id to {mention id: singleton definition}; when
    given, every pair must have both definitions.
    """
    if format not in ("chatml", "marker"):
        raise ValueError(f"unknown training format {format!r}")
    path = Path(path)
    with open(path, "w", encoding="utf-8") as fh:
        for topic in sorted(topics, key=lambda t: t.topic_id):
            if topic.gold is None:
                raise ValueError(f"topic {topic.topic_id!r} has no gold labels to export")
            topic_defs = None if definitions is None else definitions.get(topic.topic_id, {})
            for pair in enumerate_pairs(topic):
                texts = None
                if topic_defs is not None:
                    try:
                        texts = (topic_defs[pair.first], topic_defs[pair.second])
                    except KeyError as exc:
                        raise SerializationError(
                            f"topic {topic.topic_id!r}: no definition for mention {exc.args[0]!r}") from None
                item = pair_input(topic, pair, texts)
                text = serialize_chatml(item, system) if format == "chatml" else serialize_marker_format(item)
                record = {"topic_id": topic.topic_id, "first": pair.first, "second": pair.second,
                          "input": text, "label": int(gold_relation(topic, pair))}
                fh.write(json.dumps(record, ensure_ascii=False) + "\n")
    return path
