"""Record the synthetic fixture's expected artifact hashes.

Run after `arbor all --config fixtures/synthetic/config.json`; copies every
output hash from the pipeline manifest into golden_hashes.json next to the
fixture config. The regression test reruns the pipeline into a scratch
directory and compares artifact hashes against this file.
"""

import json
from pathlib import Path

FIXTURE = Path(__file__).resolve().parent.parent / "fixtures" / "synthetic"


def main() -> None:
    manifest = json.loads((FIXTURE / "out" / "manifest.json").read_text())
    artifacts = {}
    for stage, entry in sorted(manifest["stages"].items()):
        for rel, digest in entry["outputs"].items():
            artifacts[rel] = digest
    out = FIXTURE / "golden_hashes.json"
    out.write_text(json.dumps({"tool_version": manifest["tool_version"],
                               "artifacts": artifacts},
                              indent=2, sort_keys=True) + "\n")
    print(f"froze {len(artifacts)} artifact hashes to {out}")


if __name__ == "__main__":
    main()
