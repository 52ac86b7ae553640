"""Compiled inner loops.

Everything here walks TF rasters in row-major order; column-wise strides on a
(T, F) array thrash the cache badly enough to dominate the per-plot budget.
All kernels release the GIL so sensing and FFT workers overlap on multi-core
hosts.
"""

import numpy as np
from numba import njit

OTSU_BINS = 256

_opts = dict(cache=True, nogil=True)
# finite-only flags: no reassociation or approximate division, but lets LLVM
# vectorize min/max and guarded divisions. Inputs must be finite.
_vec = dict(_opts, fastmath={"nnan", "ninf", "nsz"})


@njit(**_opts)
def magnitude_shift(spec, out):
    """``out[r] = |fftshift(spec[r])|`` for a (k, F) complex block, F even."""
    k, n = spec.shape
    half = n // 2
    for r in range(k):
        src = spec[r]
        dst = out[r]
        for j in range(half):
            a = src[j]
            b = src[j + half]
            dst[j + half] = np.sqrt(a.real * a.real + a.imag * a.imag)
            dst[j] = np.sqrt(b.real * b.real + b.imag * b.imag)


@njit(**_vec)
def column_stats(rows, sumsq, lo, hi):
    """One pass over a (T, F) block: per-column sum of squares, min and max."""
    t_len, f_len = rows.shape
    first = rows[0]
    for j in range(f_len):
        v = first[j]
        sumsq[j] = np.float64(v) * v
        lo[j] = v
        hi[j] = v
    for t in range(1, t_len):
        row = rows[t]
        for j in range(f_len):
            v = row[j]
            sumsq[j] += np.float64(v) * v
            lo[j] = min(lo[j], v)
            hi[j] = max(hi[j], v)


# |num| bound below which num**2 fits in int64
_EXACT_NUM = 3_000_000_000


@njit(**_opts)
def _score_greater(num_a, den_a, num_b, den_b):
    """Exactly ``num_a**2 / den_a > num_b**2 / den_b`` for positive dens."""
    if abs(num_a) >= _EXACT_NUM or abs(num_b) >= _EXACT_NUM:
        return np.float64(num_a) ** 2 * den_b > np.float64(num_b) ** 2 * den_a
    na = num_a * num_a
    nb = num_b * num_b
    qa, ra = na // den_a, na % den_a
    qb, rb = nb // den_b, nb % den_b
    if qa != qb:
        return qa > qb
    return ra * den_b > rb * den_a


@njit(**_vec)
def _otsu_scan(hist, n_total, n0, s0, score):
    nb = hist.size
    # prefix sums kept as float64 (exact below 2**53) so the scoring loop is
    # pure float arithmetic with a store, which vectorizes
    acc_n = 0
    acc_s = 0
    for k in range(nb):
        n0[k] = acc_n
        s0[k] = acc_s
        c = hist[k]
        acc_n += c
        acc_s += k * c
    n = np.float64(n_total)
    tot = np.float64(acc_s)
    # a split with an empty class scores 0: its numerator vanishes
    for k in range(nb):
        a = n0[k]
        b = n - a
        sk = s0[k]
        num = sk * b - (tot - sk) * a
        den = a * b
        score[k] = num * num / (den if den > 1.0 else 1.0)
    best = 0.0
    for k in range(nb):
        if score[k] > best:
            best = score[k]
    if best <= 0:
        return 0
    best_k = -1
    best_num = 0
    best_den = 1
    cut = best * (1 - 1e-9)
    for k in range(nb):
        if score[k] < cut:
            continue
        a = np.int64(n0[k])
        if best_k >= 0 and n0[k] == n0[best_k]:
            continue  # same split as an earlier bin: equal score, keep lower k
        b = n_total - a
        sk = np.int64(s0[k])
        num = sk * b - (acc_s - sk) * a
        den = a * b
        if best_k < 0 or _score_greater(num, den, best_num, best_den):
            best_k = k
            best_num = num
            best_den = den
    return best_k


@njit(**_opts)
def otsu_bin(hist, n_total):
    """Index ``k`` of the best split (class 0 = bins < k); 0 when no split separates.

    Between-class variance is scored as ``(S0*N1 - S1*N0)**2 / (N0*N1)``,
    which is ``N**2 * w0 * w1 * (mu0 - mu1)**2`` in bin-index units. All
    splits are scored in float64 first; every split within float tolerance of
    the best is then compared in exact integer arithmetic, and equal scores
    keep the lowest ``k`` (so empty bins never move the threshold up).
    """
    nb = hist.size
    return _otsu_scan(hist.astype(np.int64), n_total, np.empty(nb, np.float64),
                      np.empty(nb, np.float64), np.empty(nb, np.float64))


@njit(**_vec)
def column_thresholds(rows, cols, lo, hi):
    """Per-column Otsu thresholds for sorted ``cols``, given per-column min/max.

    A value ``v`` of column ``c`` lands in bin
    ``min(int((v - lo[c]) * (256 / (hi[c] - lo[c]))), 255)`` in float64 and the
    threshold for split ``k`` is ``lo[c] + k / scale``. Returns ``inf`` for
    constant columns (and when no split exists), which keeps them background.
    Histograms are filled over contiguous column runs so the bin arithmetic
    vectorizes; the scatter into the histograms is a separate loop.
    """
    t_len = rows.shape[0]
    nc = cols.size
    th = np.full(nc, np.inf)
    if nc == 0 or t_len == 0:
        return th
    lo_c = np.empty(nc, np.float64)
    scale = np.empty(nc, np.float64)
    for j in range(nc):
        c = cols[j]
        lo_c[j] = lo[c]
        span = np.float64(hi[c]) - np.float64(lo[c])
        scale[j] = OTSU_BINS / span if span > 0 else 0.0
    # run r covers cols[starts[r]:starts[r + 1]], which are consecutive columns
    starts = np.empty(nc + 1, np.int64)
    n_runs = 0
    for j in range(nc):
        if j == 0 or cols[j] != cols[j - 1] + 1:
            starts[n_runs] = j
            n_runs += 1
    starts[n_runs] = nc
    hist = np.zeros((nc, OTSU_BINS), np.int32)
    kbuf = np.empty(nc, np.int64)
    for t in range(t_len):
        row = rows[t]
        for r in range(n_runs):
            j0 = starts[r]
            shift = cols[j0] - j0
            for j in range(j0, starts[r + 1]):
                kbuf[j] = min(int((np.float64(row[shift + j]) - lo_c[j]) * scale[j]), OTSU_BINS - 1)
        for j in range(nc):
            hist[j, kbuf[j]] += 1
    n0 = np.empty(OTSU_BINS, np.float64)
    s0 = np.empty(OTSU_BINS, np.float64)
    score = np.empty(OTSU_BINS, np.float64)
    for j in range(nc):
        if scale[j] == 0.0:
            continue
        k = _otsu_scan(hist[j], t_len, n0, s0, score)
        if k > 0:
            th[j] = lo_c[j] + k / scale[j]
    return th


@njit(**_opts)
def _find(parent, x):
    root = x
    while parent[root] != root:
        root = parent[root]
    while parent[x] != root:
        nxt = parent[x]
        parent[x] = root
        x = nxt
    return root


@njit(**_opts)
def label4(mask):
    """Two-pass 4-connected labeling with union-find.

    Labels are numbered 1..n in raster order of each component's first pixel.
    Returns ``(labels, n, extents, areas)`` with extents rows
    ``(min_t, max_t, min_f, max_f)``.
    """
    t_len, f_len = mask.shape
    labels = np.zeros((t_len, f_len), np.int32)
    parent = np.zeros(t_len * f_len // 2 + 2, np.int32)
    nxt = 1
    for t in range(t_len):
        for f in range(f_len):
            if not mask[t, f]:
                continue
            up = labels[t - 1, f] if t > 0 else 0
            left = labels[t, f - 1] if f > 0 else 0
            if up == 0 and left == 0:
                parent[nxt] = nxt
                labels[t, f] = nxt
                nxt += 1
            elif up == 0:
                labels[t, f] = left
            elif left == 0 or left == up:
                labels[t, f] = up
            else:
                ru = _find(parent, up)
                rl = _find(parent, left)
                if ru < rl:
                    parent[rl] = ru
                    labels[t, f] = ru
                else:
                    parent[ru] = rl
                    labels[t, f] = rl
    # roots are always the smallest provisional label of their set, and
    # provisional labels are issued in raster order, so this renumbering is
    # by first pixel
    final = np.zeros(nxt, np.int32)
    n = 0
    for i in range(1, nxt):
        r = _find(parent, i)
        if r == i:
            n += 1
            final[i] = n
        else:
            final[i] = final[r]
    extents = np.empty((n, 4), np.int64)
    for i in range(n):
        extents[i, 0] = t_len
        extents[i, 1] = -1
        extents[i, 2] = f_len
        extents[i, 3] = -1
    areas = np.zeros(n, np.int64)
    for t in range(t_len):
        for f in range(f_len):
            p = labels[t, f]
            if p == 0:
                continue
            lab = final[p]
            labels[t, f] = lab
            i = lab - 1
            areas[i] += 1
            if t < extents[i, 0]:
                extents[i, 0] = t
            if t > extents[i, 1]:
                extents[i, 1] = t
            if f < extents[i, 2]:
                extents[i, 2] = f
            if f > extents[i, 3]:
                extents[i, 3] = f
    return labels, n, extents, areas


@njit(**_opts)
def box_sums(integral, kh, kw):
    """Sums of every ``kh x kw`` window from a (T+1, F+1) integral image."""
    t_len = integral.shape[0] - kh
    f_len = integral.shape[1] - kw
    out = np.empty((t_len, f_len), np.float64)
    for t in range(t_len):
        a = integral[t]
        b = integral[t + kh]
        for f in range(f_len):
            out[t, f] = b[f + kw] - b[f] - a[f + kw] + a[f]
    return out


# ---------------------------------------------------------------------------
# bit-packed masks: bit i of word w in a row is column 64*w + i; bits past the
# last column are always zero (background)

ALL_ONES = np.uint64(0xFFFFFFFFFFFFFFFF)


@njit(**_opts)
def _tail_mask(n_cols):
    r = n_cols & 63
    if r == 0:
        return ALL_ONES
    return (np.uint64(1) << np.uint64(r)) - np.uint64(1)


@njit(**_opts)
def _shift_h(src, dst, n_cols, dilate):
    """One radius-1 pass along a row: OR (dilate) or AND (erode) with both neighbours."""
    t_len, words = src.shape
    tail = _tail_mask(n_cols)
    one = np.uint64(1)
    s63 = np.uint64(63)
    for t in range(t_len):
        s = src[t]
        d = dst[t]
        for w in range(words):
            x = s[w]
            left = x << one  # column c takes column c-1
            if w > 0:
                left |= s[w - 1] >> s63
            right = x >> one  # column c takes column c+1
            if w + 1 < words:
                right |= s[w + 1] << s63
            if dilate:
                d[w] = x | left | right
            else:
                d[w] = x & left & right
        d[words - 1] &= tail


@njit(**_opts)
def _shift_v(src, dst, dilate):
    t_len, words = src.shape
    for t in range(t_len):
        for w in range(words):
            x = src[t, w]
            up = src[t - 1, w] if t > 0 else np.uint64(0)
            down = src[t + 1, w] if t + 1 < t_len else np.uint64(0)
            if dilate:
                dst[t, w] = x | up | down
            else:
                dst[t, w] = x & up & down


@njit(**_opts)
def morph_packed(packed, n_cols, rt, rf, dilate):
    """Erode or dilate by a (2*rt+1) x (2*rf+1) all-ones element; returns a new array."""
    a = packed.copy()
    b = np.empty_like(packed)
    for _ in range(rt):
        _shift_v(a, b, dilate)
        a, b = b, a
    for _ in range(rf):
        _shift_h(a, b, n_cols, dilate)
        a, b = b, a
    return a


@njit(**_opts)
def consolidate_packed(packed, n_cols, line_along_freq):
    """3x3 close, 3x3 open, then a 3-long open along frequency or time."""
    a = packed.copy()
    b = np.empty_like(packed)
    # close: dilate then erode
    _shift_v(a, b, True)
    _shift_h(b, a, n_cols, True)
    _shift_v(a, b, False)
    _shift_h(b, a, n_cols, False)
    # open: erode then dilate
    _shift_v(a, b, False)
    _shift_h(b, a, n_cols, False)
    _shift_v(a, b, True)
    _shift_h(b, a, n_cols, True)
    if line_along_freq:
        _shift_h(a, b, n_cols, False)
        _shift_h(b, a, n_cols, True)
    else:
        _shift_v(a, b, False)
        _shift_v(b, a, True)
    return a


@njit(**_opts)
def copy_columns(src, src_c0, dst, dst_c0, width):
    """Copy ``width`` columns of packed rows from ``src`` at ``src_c0`` to ``dst`` at ``dst_c0``."""
    t_len = src.shape[0]
    src_words = src.shape[1]
    for t in range(t_len):
        s = src[t]
        d = dst[t]
        done = 0
        while done < width:
            dc = dst_c0 + done
            dw = dc >> 6
            db = dc & 63
            n = min(64 - db, width - done)
            sc = src_c0 + done
            sw = sc >> 6
            sb = sc & 63
            chunk = s[sw] >> np.uint64(sb)
            if sb != 0 and sw + 1 < src_words:
                chunk |= s[sw + 1] << np.uint64(64 - sb)
            keep = ALL_ONES if n == 64 else (np.uint64(1) << np.uint64(n)) - np.uint64(1)
            d[dw] = (d[dw] & ~(keep << np.uint64(db))) | ((chunk & keep) << np.uint64(db))
            done += n


@njit(**_opts)
def run_label(packed, n_cols):
    """4-connected components of a packed mask via row runs and union-find.

    Components are numbered in raster order of their first pixel, like
    :func:`label4`. Returns ``(n, extents, areas)``.
    """
    t_len, words = packed.shape
    cap = t_len * ((n_cols + 1) // 2) + 1
    r_row = np.empty(cap, np.int32)
    r_s = np.empty(cap, np.int32)
    r_e = np.empty(cap, np.int32)
    n_runs = 0
    for t in range(t_len):
        s = packed[t]
        start = -1
        for w in range(words):
            x = s[w]
            base = w << 6
            if x == 0:
                if start >= 0:
                    r_row[n_runs] = t
                    r_s[n_runs] = start
                    r_e[n_runs] = base
                    n_runs += 1
                    start = -1
                continue
            if x == ALL_ONES:
                if start < 0:
                    start = base
                continue
            for i in range(64):
                bit = (x >> np.uint64(i)) & np.uint64(1)
                if bit != 0:
                    if start < 0:
                        start = base + i
                elif start >= 0:
                    r_row[n_runs] = t
                    r_s[n_runs] = start
                    r_e[n_runs] = base + i
                    n_runs += 1
                    start = -1
        if start >= 0:
            r_row[n_runs] = t
            r_s[n_runs] = start
            r_e[n_runs] = n_cols
            n_runs += 1
    parent = np.arange(n_runs).astype(np.int32)
    # union runs of consecutive rows that share a column
    prev0 = 0
    i = 0
    while i < n_runs:
        t = r_row[i]
        j = i
        while j < n_runs and r_row[j] == t:
            j += 1
        # previous row's runs are [prev0, i) if that row is t - 1
        if i > 0 and r_row[i - 1] == t - 1:
            p = prev0
            q = i
            while p < i and q < j:
                if r_s[p] < r_e[q] and r_s[q] < r_e[p]:
                    ra = _find(parent, p)
                    rb = _find(parent, q)
                    if ra < rb:
                        parent[rb] = ra
                    elif rb < ra:
                        parent[ra] = rb
                if r_e[p] < r_e[q]:
                    p += 1
                else:
                    q += 1
        prev0 = i
        i = j
    final = np.zeros(n_runs, np.int32)
    n = 0
    for k in range(n_runs):
        r = _find(parent, k)
        if r == k:
            final[k] = n
            n += 1
        else:
            final[k] = final[r]
    extents = np.empty((n, 4), np.int64)
    areas = np.zeros(n, np.int64)
    for c in range(n):
        extents[c, 0] = t_len
        extents[c, 1] = -1
        extents[c, 2] = n_cols
        extents[c, 3] = -1
    for k in range(n_runs):
        c = final[k]
        t = r_row[k]
        areas[c] += r_e[k] - r_s[k]
        if t < extents[c, 0]:
            extents[c, 0] = t
        if t > extents[c, 1]:
            extents[c, 1] = t
        if r_s[k] < extents[c, 2]:
            extents[c, 2] = r_s[k]
        if r_e[k] - 1 > extents[c, 3]:
            extents[c, 3] = r_e[k] - 1
    return n, extents, areas


# ---------------------------------------------------------------------------
# kernel-search baseline


@njit(**_opts)
def mark_hits(integral, kh, kw, thr_sum, out):
    """OR into packed ``out`` the center cell of every ``kh x kw`` window whose power sum exceeds ``thr_sum``.

    The window with top-left cell ``(t, f)`` has center ``(t + kh // 2, f + kw // 2)``.
    """
    n_t = integral.shape[0] - kh
    n_f = integral.shape[1] - kw
    dr = kh // 2
    dc = kw // 2
    for t in range(n_t):
        a = integral[t]
        b = integral[t + kh]
        o = out[t + dr]
        for f in range(n_f):
            s = b[f + kw] - b[f] - a[f + kw] + a[f]
            c = f + dc
            o[c >> 6] |= np.uint64(s > thr_sum) << np.uint64(c & 63)


@njit(**_opts)
def _rect_sum(integral, t0, t1, f0, f1):
    return integral[t1, f1] - integral[t0, f1] - integral[t1, f0] + integral[t0, f0]


@njit(**_opts)
def expand_boxes(integral, boxes, ratio):
    """Grow half-open ``[t0, t1, f0, f1]`` boxes in place, one bin per side per step.

    A side moves out while the mean power of the strip it would add is at
    least ``ratio`` times the current box mean.
    """
    t_len = integral.shape[0] - 1
    f_len = integral.shape[1] - 1
    for i in range(boxes.shape[0]):
        t0, t1, f0, f1 = boxes[i, 0], boxes[i, 1], boxes[i, 2], boxes[i, 3]
        total = _rect_sum(integral, t0, t1, f0, f1)
        grown = True
        while grown:
            grown = False
            h = t1 - t0
            w = f1 - f0
            if f0 > 0:
                s = _rect_sum(integral, t0, t1, f0 - 1, f0)
                if s / h >= ratio * total / (h * w):
                    f0 -= 1
                    total += s
                    w += 1
                    grown = True
            if f1 < f_len:
                s = _rect_sum(integral, t0, t1, f1, f1 + 1)
                if s / h >= ratio * total / (h * w):
                    f1 += 1
                    total += s
                    w += 1
                    grown = True
            if t0 > 0:
                s = _rect_sum(integral, t0 - 1, t0, f0, f1)
                if s / w >= ratio * total / (h * w):
                    t0 -= 1
                    total += s
                    h += 1
                    grown = True
            if t1 < t_len:
                s = _rect_sum(integral, t1, t1 + 1, f0, f1)
                if s / w >= ratio * total / (h * w):
                    t1 += 1
                    total += s
                    h += 1
                    grown = True
        boxes[i, 0], boxes[i, 1], boxes[i, 2], boxes[i, 3] = t0, t1, f0, f1


@njit(**_opts)
def merge_overlapping(boxes):
    """Replace every group of overlapping half-open boxes by its bounding box.

    Repeats until no two boxes overlap. Output is sorted by ``(t0, f0)``.
    """
    cur = boxes.copy()
    while True:
        n = cur.shape[0]
        parent = np.arange(n)
        for i in range(n):
            for j in range(i + 1, n):
                if (cur[i, 0] < cur[j, 1] and cur[j, 0] < cur[i, 1]
                        and cur[i, 2] < cur[j, 3] and cur[j, 2] < cur[i, 3]):
                    ri = _find(parent, i)
                    rj = _find(parent, j)
                    if ri != rj:
                        parent[max(ri, rj)] = min(ri, rj)
        roots = np.empty(n, np.int64)
        n_out = 0
        slot = np.full(n, -1, np.int64)
        for i in range(n):
            r = _find(parent, i)
            if slot[r] < 0:
                slot[r] = n_out
                roots[n_out] = r
                n_out += 1
        out = np.empty((n_out, 4), np.int64)
        for k in range(n_out):
            out[k, 0] = out[k, 2] = 1 << 62
            out[k, 1] = out[k, 3] = -1
        for i in range(n):
            k = slot[_find(parent, i)]
            out[k, 0] = min(out[k, 0], cur[i, 0])
            out[k, 1] = max(out[k, 1], cur[i, 1])
            out[k, 2] = min(out[k, 2], cur[i, 2])
            out[k, 3] = max(out[k, 3], cur[i, 3])
        if n_out == n:
            order = np.argsort(out[:, 0] * (1 << 31) + out[:, 2])
            return out[order]
        cur = out
