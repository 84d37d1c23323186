"""Regenerate docs/config.md and configs/default.yaml from the config dataclasses."""
from pathlib import Path

from maskvol.config import RunConfig, describe_fields, dump_config

ROOT = Path(__file__).resolve().parents[1]


def main():
    lines = ["# Configuration keys", "",
             "Every key can be set in a YAML/JSON config or via `MASKVOL_<SECTION>__<KEY>` environment variables.", "",
             "| key | default |", "| --- | --- |"]
    lines += [f"| `{k}` | `{v}` |" for k, v in describe_fields()]
    (ROOT / "docs" / "config.md").write_text("\n".join(lines) + "\n")
    dump_config(RunConfig(), ROOT / "configs" / "default.yaml")


if __name__ == "__main__":
    main()
