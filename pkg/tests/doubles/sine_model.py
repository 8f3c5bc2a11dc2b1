"""theta_1 sin(theta_2 x) with an analytic gradient on request."""
import json
import math
import sys

for line in sys.stdin:
    req = json.loads(line)
    x = req["x"][0]
    a, b = req["theta"]
    resp = {"y": a * math.sin(b * x)}
    if req.get("want_grad"):
        resp["grad"] = [math.sin(b * x), a * x * math.cos(b * x)]
    print(json.dumps(resp), flush=True)
