"""Violates the protocol in the way named by argv[1]."""
import json
import sys
import time

mode = sys.argv[1]
for line in sys.stdin:
    req = json.loads(line)
    n = len(req["inputs"])
    if mode == "short":
        probs = [0.5] * (n - 1)
    elif mode == "range":
        probs = [1.5] * n
    elif mode == "sleep":
        time.sleep(30)
        probs = [0.5] * n
    elif mode == "garbage":
        print("not json", flush=True)
        continue
    elif mode == "exit":
        sys.exit(0)
    print(json.dumps({"id": req["id"], "probs": probs}), flush=True)
