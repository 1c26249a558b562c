"""Serve a model file over the line-delimited stdio scoring protocol.

    python -m zofair.oracle_server model.json [--precision float32]

Each request line ``{"id": k, "inputs": [[...], ...]}`` is answered by one
line ``{"id": k, "probs": [...]}``.
"""

from __future__ import annotations

import argparse
import json
import sys

from .model import InProcessHandle, load_model


def serve(handle, stdin=sys.stdin, stdout=sys.stdout) -> None:
    for line in stdin:
        if not line.strip():
            continue
        req = json.loads(line)
        probs = handle.predict(req["inputs"]).tolist() if req["inputs"] else []
        stdout.write(json.dumps({"id": req["id"], "probs": probs}) + "\n")
        stdout.flush()


def main(argv=None) -> None:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("model")
    parser.add_argument("--precision", default="float64", choices=["float64", "float32"])
    args = parser.parse_args(argv)
    serve(InProcessHandle(load_model(args.model), precision=args.precision))


if __name__ == "__main__":
    main()
