"""Compiled lattice update for the agent-based tumour model.

Sites are addressed by flat index ``x * width + y``. Per-site arrays hold the
occupant kind, its age in steps, its division count and the step at which it
last moved (so a relocated cell cannot act twice in one sweep).
"""

import numpy as np
from numba import njit

EMPTY, CANCER, HEALTHY, IMMUNE, ECM, FENCE, GAP = 0, 1, 2, 3, 4, 5, 6

# float parameter vector layout
F_MOVE, F_STICK, F_DIV_C, F_DIV_H, F_CT, F_CI, F_ECM, F_FENCE, F_IMMUNE = range(9)
# int parameter vector layout
I_RADIUS, I_DIV_AGE, I_MAX_HDIV, I_TRIGGER, I_N_INJECT = range(5)
# counter vector layout
N_C, N_H, N_I, N_ESC, N_INJECTED, N_STEP = range(6)


@njit(cache=True)
def _shuffle(buf, n, rng):
    for i in range(n - 1, 0, -1):
        j = int(rng.random() * (i + 1))
        tmp = buf[i]
        buf[i] = buf[j]
        buf[j] = tmp


@njit(cache=True)
def _has_cancer_neighbour(kind, x, y, w, h):
    for dx in range(-1, 2):
        for dy in range(-1, 2):
            if dx == 0 and dy == 0:
                continue
            nx = x + dx
            ny = y + dy
            if 0 <= nx < h and 0 <= ny < w and kind[nx * w + ny] == CANCER:
                return True
    return False


@njit(cache=True)
def _has_empty_neighbour(kind, x, y, w, h):
    for dx in range(-1, 2):
        for dy in range(-1, 2):
            if dx == 0 and dy == 0:
                continue
            nx = x + dx
            ny = y + dy
            if 0 <= nx < h and 0 <= ny < w and kind[nx * w + ny] == EMPTY:
                return True
    return False


@njit(cache=True)
def _relocate(kind, age, divs, stamp, src, dst):
    kind[dst] = kind[src]
    age[dst] = age[src]
    divs[dst] = divs[src]
    stamp[dst] = stamp[src]
    kind[src] = EMPTY
    age[src] = 0
    divs[src] = 0


@njit(cache=True)
def _inject(kind, age, divs, inner, counts, n_inject, buf, rng):
    n_free = 0
    for s in range(kind.size):
        if kind[s] == EMPTY and not inner[s]:
            buf[n_free] = s
            n_free += 1
    _shuffle(buf, n_free, rng)
    placed = 0
    for i in range(min(n_free, n_inject)):
        s = buf[i]
        kind[s] = IMMUNE
        age[s] = 0
        divs[s] = 0
        placed += 1
    if placed < n_inject:
        # outer region exhausted: overflow onto free inner sites
        n_free = 0
        for s in range(kind.size):
            if kind[s] == EMPTY and inner[s]:
                buf[n_free] = s
                n_free += 1
        _shuffle(buf, n_free, rng)
        for i in range(min(n_free, n_inject - placed)):
            s = buf[i]
            kind[s] = IMMUNE
            age[s] = 0
            divs[s] = 0
            placed += 1
    counts[N_I] += placed
    counts[N_INJECTED] = 1


@njit(cache=True)
def step_kernel(kind, age, divs, stamp, inner, counts, fp, ip, w, rng, buf):
    """Advance the lattice by one step in place."""
    h = kind.size // w
    step_no = counts[N_STEP] + 1
    radius = ip[I_RADIUS]
    side = 2 * radius + 1
    n_offsets = side * side - 1
    centre = radius * side + radius

    # (1) random-sequential cancer moves
    n = 0
    for s in range(kind.size):
        if kind[s] == CANCER:
            buf[n] = s
            n += 1
    _shuffle(buf, n, rng)
    for i in range(n):
        s = buf[i]
        if kind[s] != CANCER or stamp[s] == step_no:
            continue
        stamp[s] = step_no
        if rng.random() >= fp[F_MOVE]:
            continue
        x = s // w
        y = s - x * w
        if fp[F_STICK] > 0.0 and _has_cancer_neighbour(kind, x, y, w, h):
            if rng.random() < fp[F_STICK]:
                continue
        k = int(rng.random() * n_offsets)
        if k >= centre:
            k += 1
        nx = x + k // side - radius
        ny = y + k % side - radius
        if nx < 0 or nx >= h or ny < 0 or ny >= w:
            continue
        t = nx * w + ny
        kt = kind[t]
        if kt == EMPTY:
            _relocate(kind, age, divs, stamp, s, t)
        elif kt == IMMUNE:
            # competition: the cancer cell dies if u < C_I, else it takes the site
            if rng.random() < fp[F_CI]:
                kind[s] = EMPTY
                age[s] = 0
                counts[N_C] -= 1
            else:
                counts[N_I] -= 1
                _relocate(kind, age, divs, stamp, s, t)
        elif kt == GAP:
            kind[s] = EMPTY
            age[s] = 0
            counts[N_C] -= 1
            counts[N_ESC] += 1
        elif kt == ECM:
            if rng.random() < fp[F_ECM]:
                kind[t] = EMPTY
        elif kt == FENCE:
            if rng.random() < fp[F_FENCE]:
                kind[t] = GAP

    # (2) divisions of cancer and healthy cells, one shuffled sweep
    n = 0
    for s in range(kind.size):
        if kind[s] == CANCER or kind[s] == HEALTHY:
            buf[n] = s
            n += 1
    _shuffle(buf, n, rng)
    div_age = ip[I_DIV_AGE]
    for i in range(n):
        s = buf[i]
        ks = kind[s]
        if age[s] < div_age:
            continue
        x = s // w
        y = s - x * w
        if ks == CANCER:
            if rng.random() >= fp[F_DIV_C]:
                continue
            # contact inhibition: fully enclosed cells do not attempt division
            if not _has_empty_neighbour(kind, x, y, w, h):
                continue
            age[s] = 0
            k = int(rng.random() * 8)
            if k >= 4:
                k += 1
            nx = x + k // 3 - 1
            ny = y + k % 3 - 1
            if nx < 0 or nx >= h or ny < 0 or ny >= w:
                continue
            t = nx * w + ny
            kt = kind[t]
            place = False
            if kt == EMPTY:
                place = True
            elif kt == HEALTHY:
                if rng.random() < fp[F_CT]:
                    counts[N_H] -= 1
                    place = True
            if place:
                kind[t] = CANCER
                age[t] = 0
                divs[t] = 0
                stamp[t] = step_no
                counts[N_C] += 1
        elif ks == HEALTHY:
            if divs[s] >= ip[I_MAX_HDIV] or rng.random() >= fp[F_DIV_H]:
                continue
            m = 0
            cand = np.empty(8, dtype=np.int64)
            for dx in range(-1, 2):
                for dy in range(-1, 2):
                    if dx == 0 and dy == 0:
                        continue
                    nx = x + dx
                    ny = y + dy
                    if 0 <= nx < h and 0 <= ny < w:
                        t = nx * w + ny
                        if kind[t] == EMPTY and inner[t]:
                            cand[m] = t
                            m += 1
            if m == 0:
                continue
            t = cand[int(rng.random() * m)]
            divs[s] += 1
            age[s] = 0
            kind[t] = HEALTHY
            age[t] = 0
            divs[t] = divs[s]
            counts[N_H] += 1

    # (3) ageing
    for s in range(kind.size):
        if kind[s] == CANCER or kind[s] == HEALTHY:
            age[s] += 1

    # (4) one-off immune injection
    if counts[N_INJECTED] == 0 and counts[N_C] >= ip[I_TRIGGER]:
        _inject(kind, age, divs, inner, counts, ip[I_N_INJECT], buf, rng)

    counts[N_STEP] = step_no


@njit(cache=True)
def run_kernel(kind, age, divs, stamp, inner, counts, fp, ip, w, rng, n_steps):
    """Run ``n_steps`` steps; returns per-step counts of C, H, I and escapes."""
    buf = np.empty(kind.size, dtype=np.int64)
    out = np.empty((n_steps + 1, 4), dtype=np.int64)
    for j in range(4):
        out[0, j] = counts[j]
    for n in range(n_steps):
        step_kernel(kind, age, divs, stamp, inner, counts, fp, ip, w, rng, buf)
        for j in range(4):
            out[n + 1, j] = counts[j]
    return out
