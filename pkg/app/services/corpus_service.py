import csv
import io
import json
import logging
import re
from pathlib import Path

import numpy as np
import pandas as pd
from pydantic import ValidationError

from app.exceptions import CorpusFormatError, EmptyCorpusError, PreconditionError
from app.schemas.corpus import (
    CorpusFormat,
    CorpusStats,
    IdMaps,
    IndexedRecord,
    InteractionRecord,
    SplitSpec,
)

logger = logging.getLogger(__name__)

# Field roles; the CSV header uses the same names
AMAZON_FIELDS = {
    "reviewerID": "user_id",
    "asin": "item_id",
    "overall": "rating",
    "reviewText": "review_text",
    "unixReviewTime": "timestamp",
}
REQUIRED_FIELDS = ("reviewerID", "asin", "overall", "reviewText")


def _to_record(raw: dict, line_number: int) -> InteractionRecord:
    missing = [name for name in REQUIRED_FIELDS if name not in raw]
    if missing:
        raise CorpusFormatError(f"missing fields {', '.join(missing)}", line_number)
    values = {AMAZON_FIELDS[key]: raw[key] for key in AMAZON_FIELDS if key in raw}
    if values.get("timestamp") in ("", None):
        values.pop("timestamp", None)
    values["user_id"] = str(values["user_id"])
    values["item_id"] = str(values["item_id"])
    values["review_text"] = "" if values["review_text"] is None else str(values["review_text"])
    try:
        return InteractionRecord(**values)
    except ValidationError as e:
        raise CorpusFormatError(str(e.errors()[0]["msg"]), line_number) from e


def _decode(data: bytes, first_line: int = 1) -> str:
    try:
        return data.decode("utf-8")
    except UnicodeDecodeError as e:
        line_number = first_line + data.count(b"\n", 0, e.start)
        raise CorpusFormatError(f"invalid UTF-8 ({e.reason})", line_number) from e


def _read_json_lines(path: Path) -> list[InteractionRecord]:
    records = []
    with path.open("rb") as handle:
        for line_number, data in enumerate(handle, start=1):
            line = _decode(data, line_number)
            if not line.strip():
                continue
            try:
                raw = json.loads(line)
            except json.JSONDecodeError as e:
                raise CorpusFormatError(f"invalid JSON ({e.msg})", line_number) from e
            if not isinstance(raw, dict):
                raise CorpusFormatError("expected a JSON object", line_number)
            records.append(_to_record(raw, line_number))
    return records


def _row_start_lines(text: str) -> list[int]:
    """Physical line on which each non-blank CSV row starts; quoted fields may span lines"""
    reader = csv.reader(io.StringIO(text))
    starts, previous = [], 0
    for row in reader:
        if row:
            starts.append(previous + 1)
        previous = reader.line_num
    return starts


def _read_csv(path: Path) -> list[InteractionRecord]:
    text = _decode(path.read_bytes())
    try:
        frame = pd.read_csv(io.StringIO(text), dtype=str, keep_default_na=False, on_bad_lines="error")
    except pd.errors.EmptyDataError:
        return []
    except pd.errors.ParserError as e:
        match = re.search(r"line (\d+)", str(e))
        raise CorpusFormatError(str(e), int(match.group(1)) if match else None) from e
    missing = [name for name in REQUIRED_FIELDS if name not in frame.columns]
    if missing:
        raise CorpusFormatError(f"header lacks columns {', '.join(missing)}", 1)
    starts = _row_start_lines(text)
    if len(starts) != len(frame) + 1:
        # Header is line 1
        starts = list(range(1, len(frame) + 2))
    records = []
    for offset, row in enumerate(frame.to_dict(orient="records")):
        records.append(_to_record(row, starts[offset + 1]))
    return records


def deduplicate(records: list[InteractionRecord]) -> list[InteractionRecord]:
    """Keep one record per (user, item): the latest by timestamp, else the first in file order"""
    kept: dict[tuple[str, str], InteractionRecord] = {}
    for record in records:
        key = (record.user_id, record.item_id)
        current = kept.get(key)
        if current is None:
            kept[key] = record
        elif (
            record.timestamp is not None
            and (current.timestamp is None or record.timestamp > current.timestamp)
        ):
            # Re-inserting keeps the first-appearance position of the pair
            kept[key] = record
    return list(kept.values())


def build_id_maps(records: list[InteractionRecord]) -> IdMaps:
    user_index: dict[str, int] = {}
    item_index: dict[str, int] = {}
    for record in records:
        user_index.setdefault(record.user_id, len(user_index))
        item_index.setdefault(record.item_id, len(item_index))
    return IdMaps(user_index=user_index, item_index=item_index)


def load_corpus(
    path: Path | str, format: CorpusFormat | str = CorpusFormat.amazon_json_lines
) -> tuple[list[IndexedRecord], IdMaps]:
    """Parse a raw review file into deduplicated, densely indexed records."""
    path = Path(path)
    if not path.exists():
        raise PreconditionError(f"corpus file not found: {path}")
    format = CorpusFormat(format)
    if format == CorpusFormat.csv:
        raw_records = _read_csv(path)
    else:
        raw_records = _read_json_lines(path)
    if not raw_records:
        raise EmptyCorpusError(f"corpus {path} contains no records")

    records = deduplicate(raw_records)
    id_maps = build_id_maps(records)
    indexed = [
        IndexedRecord(
            **record.model_dump(),
            user_index=id_maps.user_index[record.user_id],
            item_index=id_maps.item_index[record.item_id],
        )
        for record in records
    ]
    dropped = len(raw_records) - len(records)
    if dropped:
        logger.info(f"Dropped {dropped} duplicate (user, item) records")
    return indexed, id_maps


def corpus_stats(records: list[IndexedRecord], id_maps: IdMaps) -> CorpusStats:
    cells = id_maps.num_users * id_maps.num_items
    return CorpusStats(
        num_users=id_maps.num_users,
        num_items=id_maps.num_items,
        num_interactions=len(records),
        sparsity=1.0 - len(records) / cells if cells else 1.0,
    )


def _round_half_up(value: float) -> int:
    return int(np.floor(value + 0.5))


def split_counts(degree: int, ratio_test: float = 0.2, ratio_val: float = 0.1) -> tuple[int, int, int]:
    """(train, validation, test) sizes for a user with `degree` interactions"""
    if degree < 2:
        return degree, 0, 0
    n_test = min(degree - 1, max(1, _round_half_up(ratio_test * degree)))
    remaining = degree - n_test
    n_val = min(remaining - 1, _round_half_up(ratio_val * remaining))
    return remaining - n_val, n_val, n_test


def split_interactions(
    records: list[IndexedRecord],
    ratio_test: float = 0.2,
    ratio_val: float = 0.1,
    seed: int = 2024,
) -> SplitSpec:
    """Randomly hold out each user's interactions for testing and validation.

    Users are visited in index order and each draws from its own stream
    derived from (seed, user index), so the split does not depend on the
    order records arrive in.
    """
    by_user: dict[int, list[int]] = {}
    for record in records:
        by_user.setdefault(record.user_index, []).append(record.item_index)
    if any(len(items) == 0 for items in by_user.values()):
        raise PreconditionError("every user needs at least one interaction")

    train, validation, test = [], [], []
    for user in sorted(by_user):
        items = np.array(sorted(by_user[user]), dtype=np.int64)
        n_train, n_val, n_test = split_counts(len(items), ratio_test, ratio_val)
        rng = np.random.default_rng([seed, user])
        shuffled = items[rng.permutation(len(items))]
        test += [(user, int(i)) for i in sorted(shuffled[:n_test])]
        validation += [(user, int(i)) for i in sorted(shuffled[n_test:n_test + n_val])]
        train += [(user, int(i)) for i in sorted(shuffled[n_test + n_val:])]
    return SplitSpec(train=train, validation=validation, test=test, rng_seed=seed)


def save_corpus(records: list[IndexedRecord], path: Path) -> None:
    with path.open("w", encoding="utf-8") as handle:
        for record in records:
            handle.write(record.model_dump_json() + "\n")


def load_saved_corpus(path: Path) -> list[IndexedRecord]:
    with path.open("r", encoding="utf-8") as handle:
        return [IndexedRecord.model_validate_json(line) for line in handle if line.strip()]


def save_id_maps(id_maps: IdMaps, path: Path) -> None:
    path.write_text(id_maps.model_dump_json(indent=2), encoding="utf-8")


def load_id_maps(path: Path) -> IdMaps:
    return IdMaps.model_validate_json(path.read_text(encoding="utf-8"))


def save_split(split: SplitSpec, path: Path) -> None:
    path.write_text(split.model_dump_json(), encoding="utf-8")


def load_split(path: Path) -> SplitSpec:
    return SplitSpec.model_validate_json(path.read_text(encoding="utf-8"))
