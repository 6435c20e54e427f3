"""Slow pure-Python reference implementations used as test oracles.

They share no code with the library: loops over pixels, explicit border
index arithmetic and a breadth-first hysteresis flood fill.
"""
import math
from collections import deque


def reflect_index(i, n):
    """Half-sample symmetric border (d c b a | a b c d | d c b a)."""
    period = 2 * n
    i %= period
    return i if i < n else period - 1 - i


def bilateral(img, sigma_s, sigma_r):
    """img: list of rows of per-channel tuples (or numpy array)."""
    Y, X = len(img), len(img[0])
    C = len(img[0][0])
    r = math.ceil(3 * sigma_s)
    out = [[[0.0] * C for _ in range(X)] for _ in range(Y)]
    for y in range(Y):
        for x in range(X):
            for c in range(C):
                centre = float(img[y][x][c])
                num = den = 0.0
                for dy in range(-r, r + 1):
                    for dx in range(-r, r + 1):
                        v = float(img[reflect_index(y + dy, Y)][reflect_index(x + dx, X)][c])
                        w = math.exp(-(dy * dy + dx * dx) / (2 * sigma_s ** 2)) * \
                            math.exp(-((v - centre) ** 2) / (2 * sigma_r ** 2))
                        num += w * v
                        den += w
                out[y][x][c] = num / den
    return out


def _convolve_axis(img, kernel, axis):
    Y, X = len(img), len(img[0])
    r = len(kernel) // 2
    out = [[0.0] * X for _ in range(Y)]
    for y in range(Y):
        for x in range(X):
            s = 0.0
            for k, w in enumerate(kernel):
                o = k - r
                if axis == 0:
                    s += w * img[reflect_index(y + o, Y)][x]
                else:
                    s += w * img[y][reflect_index(x + o, X)]
            out[y][x] = s
    return out


def gaussian_kernel(sigma, truncate=4.0):
    r = int(truncate * sigma + 0.5)
    w = [math.exp(-0.5 * (i / sigma) ** 2) for i in range(-r, r + 1)]
    z = sum(w)
    return [v / z for v in w]


def canny(gray, low, high, sigma=1.4, relative=False):
    """Reference Canny: Gaussian -> Sobel -> 4-direction NMS -> 8-connected hysteresis."""
    g = [[float(v) for v in row] for row in gray]
    k = gaussian_kernel(sigma)
    sm = _convolve_axis(_convolve_axis(g, k, 0), k, 1)
    # Sobel: derivative (-1, 0, 1) along one axis, smoothing (1, 2, 1) along the other
    gx = _convolve_axis(_convolve_axis(sm, [-1.0, 0.0, 1.0], 1), [1.0, 2.0, 1.0], 0)
    gy = _convolve_axis(_convolve_axis(sm, [-1.0, 0.0, 1.0], 0), [1.0, 2.0, 1.0], 1)
    Y, X = len(g), len(g[0])
    mag = [[math.hypot(gx[y][x], gy[y][x]) for x in range(X)] for y in range(Y)]
    if relative:
        peak = max(max(r) for r in mag)
        low, high = low * peak, high * peak

    def at(y, x):
        return mag[y][x] if 0 <= y < Y and 0 <= x < X else 0.0

    nms = [[0.0] * X for _ in range(Y)]
    for y in range(Y):
        for x in range(X):
            m = mag[y][x]
            if m <= 0:
                continue
            ang = math.degrees(math.atan2(gy[y][x], gx[y][x])) % 180.0
            if ang < 22.5 or ang >= 157.5:
                f, b = (0, 1), (0, -1)
            elif ang < 67.5:
                f, b = (1, 1), (-1, -1)
            elif ang < 112.5:
                f, b = (1, 0), (-1, 0)
            else:
                f, b = (1, -1), (-1, 1)
            if m >= at(y + f[0], x + f[1]) and m > at(y + b[0], x + b[1]):
                nms[y][x] = m
    edges = [[False] * X for _ in range(Y)]
    seen = [[False] * X for _ in range(Y)]
    for y in range(Y):
        for x in range(X):
            if nms[y][x] > high and not seen[y][x]:
                queue = deque([(y, x)])
                seen[y][x] = True
                while queue:
                    cy, cx = queue.popleft()
                    edges[cy][cx] = True
                    for dy in (-1, 0, 1):
                        for dx in (-1, 0, 1):
                            ny, nx = cy + dy, cx + dx
                            if 0 <= ny < Y and 0 <= nx < X and not seen[ny][nx] and nms[ny][nx] > low:
                                seen[ny][nx] = True
                                queue.append((ny, nx))
    return edges, nms, mag
