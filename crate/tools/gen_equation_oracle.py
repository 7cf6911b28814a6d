"""Freeze high-precision reference values for the uncertainty equations.

Run from the repository root:
    python3 tools/gen_equation_oracle.py > crates/core/tests/fixtures/equation_oracle.json
"""
import json
import random

import mpmath as mp

mp.mp.dps = 50


def delta_f_at(t, c):
    if c["delta_f_late"] is not None and t >= c["switch_iteration"]:
        return mp.mpf(c["delta_f_late"])
    return mp.mpf(c["delta_f"])


def normalized(iou, t, c):
    lo = mp.mpf(c["delta_b"])
    hi = delta_f_at(t, c)
    iou = mp.mpf(iou)
    if lo < iou < hi:
        r = 2 * (iou - lo) / (hi - lo) - 1
        return 1 / (1 + mp.e ** (-mp.mpf(c["c"]) * r))
    return mp.mpf(1)


def main():
    rng = random.Random(20211018)
    cases = []
    for i in range(1000):
        if i < 500:
            cfg = dict(delta_b=0.5, delta_f=0.7, delta_f_late=0.8, c=15.0, q=0.1,
                       total_iterations=rng.choice([1, 10, 2000, 90000]))
        else:
            delta_b = rng.uniform(0.05, 0.7)
            delta_f = rng.uniform(delta_b + 0.01, 0.99)
            late = rng.choice([None, rng.uniform(delta_b + 0.01, 0.999)])
            cfg = dict(delta_b=delta_b, delta_f=delta_f, delta_f_late=late,
                       c=rng.uniform(0.5, 40.0), q=rng.uniform(0.01, 3.0),
                       total_iterations=rng.randint(1, 100000))
        big_t = cfg["total_iterations"]
        cfg["switch_iteration"] = rng.randint(0, big_t)
        # bias the overlap towards the sigmoid window
        if rng.random() < 0.7:
            iou = rng.uniform(cfg["delta_b"], max(cfg["delta_f"], cfg["delta_f_late"] or 0))
        else:
            iou = rng.random()
        score = rng.random()
        t = rng.randint(0, big_t)
        k = rng.randint(1, 20)
        category = rng.randrange(k)

        i_n = normalized(iou, t, cfg)
        positive = mp.mpf(iou) > mp.mpf(cfg["delta_b"])
        beta = (mp.mpf(t) / big_t) ** mp.mpf(cfg["q"])
        if positive:
            u = 1 - mp.mpf(score) * i_n
            x = mp.mpf(score) * i_n
            u_beta = 1 - (x ** beta if not (x == 0 and beta == 0) else mp.mpf(1))
        else:
            u = mp.mpf(0)
            u_beta = mp.mpf(0)
        cases.append(dict(
            config=cfg, iou=iou, score=score, t=t, num_classes=k, category=category,
            positive=bool(positive),
            normalized_iou=float(i_n), uncertainty=float(u), beta=float(beta),
            dynamic_uncertainty=float(u_beta),
            soft_foreground=float(1 - u_beta) if positive else 0.0,
            soft_background=float(u_beta) if positive else 1.0,
        ))
    print(json.dumps(cases, indent=1))


if __name__ == "__main__":
    main()
