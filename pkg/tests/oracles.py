"""Reference implementations written independently of the package code.

Nothing here imports from ``gridtrip``; each function follows the textbook
or pseudocode form directly, with plain Python scalars and loops.
"""

import cmath
import math


def clamp(x):
    return max(0.0, min(1.0, x))


def pi_reference_under(p, v_trace, ts, trv, state=None):
    """Scalar pseudocode transcription, undervoltage side.

    ``p`` is a dict with v_l0_p, v_l1_p, v_l0_i, v_l1_i, T_del and
    optionally v_l0_rec, T_rec (reactivation).
    """
    p_del, p_rec, v_min, v_filt = state or (0.0, 0.0, 1.0, 1.0)
    react = "v_l0_rec" in p
    if react:
        v_l1_rec = p["v_l0_rec"] + (p["v_l1_i"] - p["v_l0_i"])
    gain = 1.0 - math.exp(-ts / trv) if trv > 0 else 1.0
    out = []
    for v_ss in v_trace:
        v_filt = v_filt + (v_ss - v_filt) * gain
        v_min = min(v_filt, v_min)
        p_im = clamp((v_min - p["v_l0_p"]) / (p["v_l1_p"] - p["v_l0_p"]))
        rate = clamp((p["v_l1_i"] - v_filt) / (p["v_l1_i"] - p["v_l0_i"]))
        p_del = p_del + rate * (ts / p["T_del"])
        lim = clamp((p["v_l1_i"] - v_min) / (p["v_l1_i"] - p["v_l0_i"]))
        p_del = min(p_del, lim)
        if react:
            rate = clamp((v_filt - p["v_l0_rec"]) / (v_l1_rec - p["v_l0_rec"]))
            p_rec = p_rec + rate * (ts / p["T_rec"])
            lim = clamp((v_filt - p["v_l0_rec"]) / (v_l1_rec - p["v_l0_rec"]))
            p_rec = min(p_rec, lim)
        out.append(clamp(p_im - p_del + p_rec))
    return out, (p_del, p_rec, v_min, v_filt)


def pi_reference_over(p, v_trace, ts, trv, state=None):
    """Overvoltage side written out with running maximum and mirrored spans.

    ``p`` holds v_h0_p > v_h1_p, v_h0_i > v_h1_i, T_del and optionally
    v_h0_rec, T_rec.
    """
    p_del, p_rec, v_max, v_filt = state or (0.0, 0.0, 1.0, 1.0)
    react = "v_h0_rec" in p
    if react:
        v_h1_rec = p["v_h0_rec"] - (p["v_h0_i"] - p["v_h1_i"])
    gain = 1.0 - math.exp(-ts / trv) if trv > 0 else 1.0
    out = []
    for v_ss in v_trace:
        v_filt = v_filt + (v_ss - v_filt) * gain
        v_max = max(v_filt, v_max)
        p_im = clamp((p["v_h0_p"] - v_max) / (p["v_h0_p"] - p["v_h1_p"]))
        rate = clamp((v_filt - p["v_h1_i"]) / (p["v_h0_i"] - p["v_h1_i"]))
        p_del = p_del + rate * (ts / p["T_del"])
        lim = clamp((v_max - p["v_h1_i"]) / (p["v_h0_i"] - p["v_h1_i"]))
        p_del = min(p_del, lim)
        if react:
            rate = clamp((p["v_h0_rec"] - v_filt) / (p["v_h0_rec"] - v_h1_rec))
            p_rec = p_rec + rate * (ts / p["T_rec"])
            lim = clamp((p["v_h0_rec"] - v_filt) / (p["v_h0_rec"] - v_h1_rec))
            p_rec = min(p_rec, lim)
        out.append(clamp(p_im - p_del + p_rec))
    return out, (p_del, p_rec, v_max, v_filt)


def ybus_reference(n, branches, shunts=None):
    """Branch-by-branch Y-bus with the off-nominal tap on the from side.

    ``branches`` holds (i, j, z, b_total, tap) with integer bus positions.
    """
    Y = [[0j] * n for _ in range(n)]
    for i, j, z, b, tap in branches:
        y = 1 / z
        Y[i][i] += (y + 1j * b / 2) / (tap * tap)
        Y[j][j] += y + 1j * b / 2
        Y[i][j] -= y / tap
        Y[j][i] -= y / tap
    for k, y in (shunts or {}).items():
        Y[k][k] += y
    return Y


def gauss_seidel_power_flow(Y, kinds, p_sched, q_sched, v_set, tol=1e-12, max_iter=50000):
    """Textbook Gauss-Seidel load flow (slack, PV and PQ buses).

    ``kinds`` is a list of "slack" / "generator" / "load"; ``v_set`` maps
    bus position to magnitude for slack and PV buses.
    """
    n = len(kinds)
    V = [complex(v_set.get(k, 1.0)) for k in range(n)]
    for _ in range(max_iter):
        worst = 0.0
        for i in range(n):
            if kinds[i] == "slack":
                continue
            s_other = sum(Y[i][k] * V[k] for k in range(n) if k != i)
            q = q_sched[i]
            if kinds[i] == "generator":
                q = -(V[i].conjugate() * (s_other + Y[i][i] * V[i])).imag
            v_new = ((p_sched[i] - 1j * q) / V[i].conjugate() - s_other) / Y[i][i]
            if kinds[i] == "generator":
                v_new = v_set[i] * cmath.exp(1j * cmath.phase(v_new))
            worst = max(worst, abs(v_new - V[i]))
            V[i] = v_new
        if worst < tol:
            return V
    raise RuntimeError("Gauss-Seidel did not converge")
