import hashlib
import json
import math
import os
from datetime import datetime, timezone


def _cell(value) -> str:
    if isinstance(value, bool):
        return "1" if value else "0"
    if isinstance(value, float):
        return "nan" if math.isnan(value) else f"{value:.6f}"
    return str(value)


def csv_body(rows: list[dict], columns: list[str]) -> str:
    lines = [",".join(columns)]
    lines.extend(",".join(_cell(row.get(c, "")) for c in columns) for row in rows)
    return "\n".join(lines) + "\n"


def _canonical(payload: dict) -> str:
    body = {k: v for k, v in payload.items() if k not in ("generated_at", "body_sha256")}
    return json.dumps(body, sort_keys=True, separators=(",", ":"), allow_nan=True)


def body_digest(csv_text: str, payload: dict) -> str:
    """Hash over the CSV body and the JSON payload, timestamps excluded."""
    digest = hashlib.sha256()
    digest.update(csv_text.encode("utf8"))
    digest.update(_canonical(payload).encode("utf8"))
    return digest.hexdigest()


def write_report(out_dir: str, case: int, rows: list[dict], columns: list[str], payload: dict) -> dict:
    os.makedirs(out_dir, exist_ok=True)
    text = csv_body(rows, columns)
    with open(os.path.join(out_dir, f"case{case}_runs.csv"), "w", newline="") as f:
        f.write(text)
    payload = dict(payload)
    payload["body_sha256"] = body_digest(text, payload)
    payload["generated_at"] = datetime.now(timezone.utc).isoformat()
    with open(os.path.join(out_dir, f"case{case}_report.json"), "w") as f:
        json.dump(payload, f, sort_keys=True, indent=2)
    return payload


def rounded(value: float, digits: int = 6) -> float:
    """Stable float for report payloads."""
    return float(f"{value:.{digits}f}") if math.isfinite(value) else value
