"""Independent reference computations used by the test-suite."""
import math

import numpy as np

from vdsm.numerics import backward, zero_grads


def finite_difference_grads(loss_fn, params, h=1e-5):
    """Central differences of a scalar ``loss_fn()`` w.r.t. every entry of ``params``."""
    grads = {}
    for name, p in params.items():
        g = np.zeros_like(p.data)
        flat = p.data.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + h
            up = float(loss_fn().data)
            flat[i] = old - h
            down = float(loss_fn().data)
            flat[i] = old
            gflat[i] = (up - down) / (2 * h)
        grads[name] = g
    return grads


def analytic_grads(loss_fn, params):
    zero_grads(params)
    backward(loss_fn())
    return {k: p.grad.copy() for k, p in params.items()}


def max_relative_error(analytic, numeric, floor=1e-6):
    worst = 0.0
    for name in analytic:
        a, n = analytic[name], numeric[name]
        denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
        worst = max(worst, float(np.max(np.abs(a - n) / denom)) if a.size else 0.0)
    return worst


def gradient_check(loss_fn, params, h=1e-5):
    return max_relative_error(analytic_grads(loss_fn, params), finite_difference_grads(loss_fn, params, h))


def g_left(times, events, t):
    """Censoring KM at t- by direct product over distinct censoring times < t."""
    value = 1.0
    for s in sorted(set(times)):
        if s >= t:
            break
        at_risk = sum(1 for x in times if x >= s)
        cens = sum(1 for x, e in zip(times, events) if x == s and not e)
        value *= 1.0 - cens / at_risk
    return value


def ctd_bruteforce(risks, times, events, horizon):
    num = den = 0.0
    n = len(times)
    for i in range(n):
        if not events[i] or times[i] > horizon:
            continue
        g = g_left(times, events, times[i])
        if g <= 0:
            continue
        w = 1.0 / g**2
        for j in range(n):
            if times[i] < times[j]:
                den += w
                num += w * (1.0 if risks[i] > risks[j] else 0.5 if risks[i] == risks[j] else 0.0)
    return num / den if den else math.nan


def auc_bruteforce(risks, times, events, horizon):
    num = den = 0.0
    n = len(times)
    for i in range(n):
        if not events[i] or times[i] > horizon:
            continue
        g = g_left(times, events, times[i])
        if g <= 0:
            continue
        for j in range(n):
            if times[j] > horizon:
                den += 1.0 / g
                num += (1.0 if risks[i] > risks[j] else 0.5 if risks[i] == risks[j] else 0.0) / g
    return num / den if den else math.nan


def harrell_naive(risks, times, events):
    num = den = 0
    for i in range(len(times)):
        if not events[i]:
            continue
        for j in range(len(times)):
            if times[i] < times[j]:
                den += 2
                num += 2 if risks[i] > risks[j] else 1 if risks[i] == risks[j] else 0
    return num / den
