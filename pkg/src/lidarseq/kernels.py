"""Hot inner loops, each with a numba kernel and a vectorised numpy twin.

The public entry points (``im2col3``, ``col2im3``, ``cast_rays``,
``zbuffer``) dispatch on :data:`lidarseq._accel.USE_NUMBA`.  Both variants
are importable directly (``*_nb`` / ``*_np``) so the benchmark and the
equivalence tests can run them side by side.
"""
import numpy as np

from ._accel import njit
from . import _accel

# Smallest accepted hit distance; rays never report a hit at their origin.
RAY_EPS = 1e-9

MISS = -1
HIT_ROOM = 0
HIT_BOX = 1
HIT_CAPSULE0 = 2  # capsule k reports HIT_CAPSULE0 + k


# ---------------------------------------------------------------------------
# im2col / col2im for 3x3 kernels, circular in w and zero-padded in h
# ---------------------------------------------------------------------------

def im2col3_np(x):
    h, w, c = x.shape
    out = np.zeros((h, w, 3, 3, c), dtype=x.dtype)
    for di in range(3):
        src_lo = max(0, di - 1)
        src_hi = min(h, h + di - 1)
        dst_lo = src_lo - (di - 1)
        rows = x[src_lo:src_hi]
        for dj in range(3):
            out[dst_lo:dst_lo + rows.shape[0], :, di, dj, :] = np.roll(rows, 1 - dj, axis=1)
    return out.reshape(h * w, 9 * c)


@njit
def im2col3_nb(x):
    h, w, c = x.shape
    out = np.zeros((h * w, 9 * c), dtype=x.dtype)
    for i in range(h):
        for j in range(w):
            r = i * w + j
            for di in range(3):
                ii = i + di - 1
                if ii < 0 or ii >= h:
                    continue
                for dj in range(3):
                    jj = j + dj - 1
                    if jj < 0:
                        jj += w
                    elif jj >= w:
                        jj -= w
                    base = (di * 3 + dj) * c
                    for k in range(c):
                        out[r, base + k] = x[ii, jj, k]
    return out


def col2im3_np(cols, h, w, c):
    """Adjoint of :func:`im2col3_np`: scatter-add patch gradients back to pixels."""
    taps = cols.reshape(h, w, 3, 3, c)
    out = np.zeros((h, w, c), dtype=cols.dtype)
    for di in range(3):
        src_lo = max(0, di - 1)
        src_hi = min(h, h + di - 1)
        dst_lo = src_lo - (di - 1)
        n = src_hi - src_lo
        for dj in range(3):
            out[src_lo:src_hi] += np.roll(taps[dst_lo:dst_lo + n, :, di, dj, :], dj - 1, axis=1)
    return out


@njit
def col2im3_nb(cols, h, w, c):
    out = np.zeros((h, w, c), dtype=cols.dtype)
    for di in range(3):
        for dj in range(3):
            base = (di * 3 + dj) * c
            for i in range(h):
                ii = i + di - 1
                if ii < 0 or ii >= h:
                    continue
                for j in range(w):
                    jj = j + dj - 1
                    if jj < 0:
                        jj += w
                    elif jj >= w:
                        jj -= w
                    r = i * w + j
                    for k in range(c):
                        out[ii, jj, k] += cols[r, base + k]
    return out


def im2col3(x):
    if _accel.USE_NUMBA:
        return im2col3_nb(np.ascontiguousarray(x))
    return im2col3_np(x)


def col2im3(cols, h, w, c):
    if _accel.USE_NUMBA:
        return col2im3_nb(np.ascontiguousarray(cols), h, w, c)
    return col2im3_np(cols, h, w, c)


# ---------------------------------------------------------------------------
# Ray casting against room / boxes / vertical capsules
# ---------------------------------------------------------------------------

@njit
def _capsule_hit(ox, oy, oz, dx, dy, dz, cx, cy, r, height):
    """Smallest positive hit distance on a vertical capsule, or inf."""
    z0 = r
    z1 = height - r
    best = np.inf
    px = ox - cx
    py = oy - cy
    a = dx * dx + dy * dy
    if a > 0.0:
        b = px * dx + py * dy
        cc = px * px + py * py - r * r
        disc = b * b - a * cc
        if disc >= 0.0:
            sq = np.sqrt(disc)
            for t in ((-b - sq) / a, (-b + sq) / a):
                if t > RAY_EPS and t < best:
                    z = oz + t * dz
                    if z >= z0 and z <= z1:
                        best = t
    for k in range(2):
        zc = z0 if k == 0 else z1
        pz = oz - zc
        b = px * dx + py * dy + pz * dz
        cc = px * px + py * py + pz * pz - r * r
        disc = b * b - cc
        if disc >= 0.0:
            sq = np.sqrt(disc)
            for t in (-b - sq, -b + sq):
                if t > RAY_EPS and t < best:
                    z = oz + t * dz
                    if (k == 0 and z <= z0) or (k == 1 and z >= z1):
                        best = t
    return best


@njit
def _box_hit(ox, oy, oz, dx, dy, dz, box):
    tnear = -np.inf
    tfar = np.inf
    o = (ox, oy, oz)
    d = (dx, dy, dz)
    for ax in range(3):
        lo = box[ax]
        hi = box[ax + 3]
        if d[ax] == 0.0:
            if o[ax] < lo or o[ax] > hi:
                return np.inf
        else:
            t1 = (lo - o[ax]) / d[ax]
            t2 = (hi - o[ax]) / d[ax]
            if t1 > t2:
                t1, t2 = t2, t1
            if t1 > tnear:
                tnear = t1
            if t2 < tfar:
                tfar = t2
    if tfar < tnear:
        return np.inf
    if tnear > RAY_EPS:
        return tnear
    if tfar > RAY_EPS:
        return tfar
    return np.inf


@njit
def _room_exit(ox, oy, oz, dx, dy, dz, room):
    best = np.inf
    o = (ox, oy, oz)
    d = (dx, dy, dz)
    for ax in range(3):
        if d[ax] > 0.0:
            t = (room[ax + 3] - o[ax]) / d[ax]
        elif d[ax] < 0.0:
            t = (room[ax] - o[ax]) / d[ax]
        else:
            continue
        if t > RAY_EPS and t < best:
            best = t
    return best


@njit
def cast_rays_nb(origin, dirs, room, boxes, capsules):
    n = dirs.shape[0]
    dist = np.full(n, np.inf)
    hit = np.full(n, MISS, dtype=np.int64)
    ox, oy, oz = origin[0], origin[1], origin[2]
    for i in range(n):
        dx, dy, dz = dirs[i, 0], dirs[i, 1], dirs[i, 2]
        best = _room_exit(ox, oy, oz, dx, dy, dz, room)
        code = HIT_ROOM if best < np.inf else MISS
        for b in range(boxes.shape[0]):
            t = _box_hit(ox, oy, oz, dx, dy, dz, boxes[b])
            if t < best:
                best = t
                code = HIT_BOX
        for k in range(capsules.shape[0]):
            t = _capsule_hit(ox, oy, oz, dx, dy, dz, capsules[k, 0], capsules[k, 1],
                             capsules[k, 2], capsules[k, 3])
            if t < best:
                best = t
                code = HIT_CAPSULE0 + k
        dist[i] = best
        hit[i] = code
    return dist, hit


def _first_positive(*roots_and_masks):
    best = None
    for t, ok in roots_and_masks:
        cand = np.where(ok & (t > RAY_EPS), t, np.inf)
        best = cand if best is None else np.minimum(best, cand)
    return best


def capsule_hits_np(origin, dirs, cx, cy, r, height):
    z0, z1 = r, height - r
    px, py, pz = origin[0] - cx, origin[1] - cy, origin[2]
    dx, dy, dz = dirs[:, 0], dirs[:, 1], dirs[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        a = dx * dx + dy * dy
        b = px * dx + py * dy
        cc = px * px + py * py - r * r
        disc = b * b - a * cc
        sq = np.sqrt(np.maximum(disc, 0.0))
        ok = (a > 0.0) & (disc >= 0.0)
        cyl = []
        for t in ((-b - sq) / a, (-b + sq) / a):
            z = pz + t * dz
            cyl.append((t, ok & (z >= z0) & (z <= z1)))
        caps = []
        for k, zc in enumerate((z0, z1)):
            qz = pz - zc
            bs = px * dx + py * dy + qz * dz
            cs = px * px + py * py + qz * qz - r * r
            ds = bs * bs - cs
            sqs = np.sqrt(np.maximum(ds, 0.0))
            for t in (-bs - sqs, -bs + sqs):
                z = pz + t * dz
                side = (z <= z0) if k == 0 else (z >= z1)
                caps.append((t, (ds >= 0.0) & side))
        return _first_positive(*cyl, *caps)


def box_hits_np(origin, dirs, box):
    tnear = np.full(dirs.shape[0], -np.inf)
    tfar = np.full(dirs.shape[0], np.inf)
    outside = np.zeros(dirs.shape[0], dtype=bool)
    with np.errstate(divide="ignore", invalid="ignore"):
        for ax in range(3):
            d = dirs[:, ax]
            lo, hi = box[ax], box[ax + 3]
            par = d == 0.0
            outside |= par & ((origin[ax] < lo) | (origin[ax] > hi))
            t1 = (lo - origin[ax]) / d
            t2 = (hi - origin[ax]) / d
            tmin = np.where(par, -np.inf, np.minimum(t1, t2))
            tmax = np.where(par, np.inf, np.maximum(t1, t2))
            tnear = np.maximum(tnear, tmin)
            tfar = np.minimum(tfar, tmax)
    valid = ~outside & (tfar >= tnear)
    t = np.where(tnear > RAY_EPS, tnear, np.where(tfar > RAY_EPS, tfar, np.inf))
    return np.where(valid, t, np.inf)


def room_exit_np(origin, dirs, room):
    best = np.full(dirs.shape[0], np.inf)
    with np.errstate(divide="ignore", invalid="ignore"):
        for ax in range(3):
            d = dirs[:, ax]
            t = np.where(d > 0.0, (room[ax + 3] - origin[ax]) / d,
                         np.where(d < 0.0, (room[ax] - origin[ax]) / d, np.inf))
            t = np.where(t > RAY_EPS, t, np.inf)
            best = np.minimum(best, t)
    return best


def cast_rays_np(origin, dirs, room, boxes, capsules):
    dist = room_exit_np(origin, dirs, room)
    hit = np.where(np.isfinite(dist), HIT_ROOM, MISS).astype(np.int64)
    for b in range(boxes.shape[0]):
        t = box_hits_np(origin, dirs, boxes[b])
        closer = t < dist
        dist = np.where(closer, t, dist)
        hit = np.where(closer, HIT_BOX, hit)
    for k in range(capsules.shape[0]):
        cx, cy, r, height = capsules[k]
        t = capsule_hits_np(origin, dirs, cx, cy, r, height)
        closer = t < dist
        dist = np.where(closer, t, dist)
        hit = np.where(closer, HIT_CAPSULE0 + k, hit)
    return dist, hit


def cast_rays(origin, dirs, room, boxes, capsules):
    """Nearest hit per ray.

    ``origin`` (3,), ``dirs`` (N, 3) unit vectors, ``room`` and each box row
    are ``[xmin, ymin, zmin, xmax, ymax, zmax]``, each capsule row is
    ``[cx, cy, radius, height]`` standing on z=0.  Returns ``(dist, hit)``
    where ``hit`` uses the ``MISS`` / ``HIT_*`` codes.
    """
    args = (np.asarray(origin, dtype=np.float64), np.ascontiguousarray(dirs, dtype=np.float64),
            np.asarray(room, dtype=np.float64),
            np.asarray(boxes, dtype=np.float64).reshape(-1, 6),
            np.asarray(capsules, dtype=np.float64).reshape(-1, 4))
    if _accel.USE_NUMBA:
        return cast_rays_nb(*args)
    return cast_rays_np(*args)


# ---------------------------------------------------------------------------
# z-buffer: nearest point per pixel
# ---------------------------------------------------------------------------

@njit
def zbuffer_nb(pixel, rng, npix):
    winner = np.full(npix, -1, dtype=np.int64)
    for i in range(pixel.shape[0]):
        p = pixel[i]
        cur = winner[p]
        if cur < 0 or rng[i] < rng[cur]:
            winner[p] = i
    return winner


def zbuffer_np(pixel, rng, npix):
    winner = np.full(npix, -1, dtype=np.int64)
    if pixel.size == 0:
        return winner
    order = np.lexsort((rng, pixel))
    first = np.ones(order.size, dtype=bool)
    first[1:] = pixel[order[1:]] != pixel[order[:-1]]
    chosen = order[first]
    winner[pixel[chosen]] = chosen
    return winner


def zbuffer(pixel, rng, npix):
    """Index of the nearest point for each flat pixel id (-1 where empty).

    Ties go to the earliest point.
    """
    pixel = np.ascontiguousarray(pixel, dtype=np.int64)
    rng = np.ascontiguousarray(rng, dtype=np.float64)
    if _accel.USE_NUMBA:
        return zbuffer_nb(pixel, rng, npix)
    return zbuffer_np(pixel, rng, npix)
