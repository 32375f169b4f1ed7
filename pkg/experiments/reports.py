"""Report schemas (DRF serializers) and the CSV / JSON artifact writers.

Field layouts are documented in SCHEMA.md.
"""

import csv
import json
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from rest_framework import serializers

from .errors import ArtifactError
from .linsymbol import format_float
from .spectral_sim import json_default

CHECK_PASS = "pass"
CHECK_FAIL = "fail"
CHECK_OBSERVED = "observed"
CHECK_SKIPPED = "skipped"
CHECK_STATUSES = (CHECK_PASS, CHECK_FAIL, CHECK_OBSERVED, CHECK_SKIPPED)


class LenientFloatField(serializers.FloatField):
    """Float that passes ``inf`` and ``None`` through unchanged."""

    def to_representation(self, value):
        if value is None:
            return None
        return float(value)


class CheckSerializer(serializers.Serializer):
    name = serializers.CharField()
    status = serializers.ChoiceField(choices=CHECK_STATUSES)
    value = LenientFloatField(allow_null=True, required=False)
    detail = serializers.CharField(allow_blank=True, required=False, default="")


class NormReportSerializer(serializers.Serializer):
    norm = serializers.CharField()
    t = LenientFloatField()
    total = LenientFloatField()
    summands = serializers.DictField(child=LenientFloatField())
    labels = serializers.DictField(child=serializers.CharField())
    empty = serializers.ListField(child=serializers.CharField())


class DataFunctionalsSerializer(serializers.Serializer):
    d_star = LenientFloatField()
    d = LenientFloatField()
    d_upper = LenientFloatField()
    norms = serializers.DictField(child=LenientFloatField())


class AprioriRowSerializer(serializers.Serializer):
    t = LenientFloatField()
    E = LenientFloatField()
    A = LenientFloatField()
    rhs_E = LenientFloatField()
    rhs_A = LenientFloatField()
    ok_E = serializers.BooleanField(allow_null=True)
    ok_A = serializers.BooleanField(allow_null=True)
    tightness_E = LenientFloatField(allow_null=True)
    tightness_A = LenientFloatField(allow_null=True)
    pressure_potential = LenientFloatField()
    low_energy = serializers.DictField(child=serializers.DictField())


class AprioriReportSerializer(serializers.Serializer):
    run_id = serializers.CharField(allow_blank=True)
    regime_flag = serializers.ChoiceField(choices=("bounded", "lhs_growth", "unstable"))
    lhs_growth_time = LenientFloatField(allow_null=True)
    fitted_constants = serializers.DictField(child=LenientFloatField(allow_null=True))
    rows = AprioriRowSerializer(many=True)
    data = DataFunctionalsSerializer()
    thresholds = serializers.SerializerMethodField()
    notes = serializers.ListField(child=serializers.CharField())

    def get_thresholds(self, obj):
        thresholds = obj["thresholds"] if isinstance(obj, dict) else obj.thresholds
        return thresholds if isinstance(thresholds, dict) else thresholds.as_dict()


class RunSummarySerializer(serializers.Serializer):
    kind = serializers.CharField()
    config_hash = serializers.CharField()
    exit_code = serializers.IntegerField()
    error = serializers.CharField(allow_blank=True)
    checks = CheckSerializer(many=True)
    files = serializers.ListField(child=serializers.CharField())


def format_cell(value) -> str:
    if value is None:
        return ""
    if isinstance(value, (bool, np.bool_)):
        return "true" if value else "false"
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        return format_float(value)
    return str(value)


def write_csv(path: Path, columns: Sequence[str], rows: Iterable[dict], config_hash: str) -> Path:
    """``# config_hash=...`` line, header, then one row per dict (floats at 17 significant digits)."""
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", newline="") as fh:
            fh.write(f"# config_hash={config_hash}\n")
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(columns)
            for row in rows:
                writer.writerow([format_cell(row.get(c)) for c in columns])
    except OSError as exc:
        raise ArtifactError(f"cannot write {path}: {exc}") from exc
    return path


def write_json(path: Path, payload: dict, config_hash: str) -> Path:
    path = Path(path)
    body = {"config_hash": config_hash, **payload}
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(body, indent=2, sort_keys=True, default=json_default))
    except OSError as exc:
        raise ArtifactError(f"cannot write {path}: {exc}") from exc
    return path


def read_csv_rows(path: Path) -> tuple[str, list[dict]]:
    """Config hash and rows of a CSV written by ``write_csv``."""
    with Path(path).open(newline="") as fh:
        first = fh.readline().strip()
        config_hash = first.split("=", 1)[1] if first.startswith("# config_hash=") else ""
        return config_hash, list(csv.DictReader(fh))
