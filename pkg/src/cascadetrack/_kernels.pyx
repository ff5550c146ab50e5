# Compiled hot kernels. Mirrors _kernels_py.py exactly in signature and semantics.
import numpy as np
cimport numpy as cnp
from libc.math cimport floor, sqrt

cnp.import_array()

NAME = "cython"


cdef inline double _tap(const float[:, :, ::1] data, Py_ssize_t c, double y, double x,
                        Py_ssize_t h, Py_ssize_t w) noexcept nogil:
    # bilinear read with zero outside the map
    cdef double fy = floor(y), fx = floor(x)
    cdef Py_ssize_t y0 = <Py_ssize_t>fy, x0 = <Py_ssize_t>fx
    cdef double ly = y - fy, lx = x - fx
    cdef double v = 0.0
    if 0 <= y0 < h:
        if 0 <= x0 < w:
            v += (1.0 - ly) * (1.0 - lx) * data[c, y0, x0]
        if 0 <= x0 + 1 < w:
            v += (1.0 - ly) * lx * data[c, y0, x0 + 1]
    if 0 <= y0 + 1 < h:
        if 0 <= x0 < w:
            v += ly * (1.0 - lx) * data[c, y0 + 1, x0]
        if 0 <= x0 + 1 < w:
            v += ly * lx * data[c, y0 + 1, x0 + 1]
    return v


def roialign(const float[:, :, ::1] data, rois, int out_size, int spb):
    cdef double[:, ::1] r = np.ascontiguousarray(rois, dtype=np.float64).reshape(-1, 4)
    cdef Py_ssize_t n = r.shape[0], nc = data.shape[0], h = data.shape[1], w = data.shape[2]
    out_arr = np.zeros((n, nc, out_size, out_size), dtype=np.float32)
    cdef float[:, :, :, ::1] out = out_arr
    cdef Py_ssize_t k, c, by, bx, sy, sx
    cdef double bin_h, bin_w, y, x, acc, inv = 1.0 / (spb * spb)
    with nogil:
        for k in range(n):
            bin_h = (r[k, 3] - r[k, 1]) / out_size
            bin_w = (r[k, 2] - r[k, 0]) / out_size
            for c in range(nc):
                for by in range(out_size):
                    for bx in range(out_size):
                        acc = 0.0
                        for sy in range(spb):
                            y = r[k, 1] + (by + (sy + 0.5) / spb) * bin_h
                            for sx in range(spb):
                                x = r[k, 0] + (bx + (sx + 0.5) / spb) * bin_w
                                acc += _tap(data, c, y, x, h, w)
                        out[k, c, by, bx] = <float>(acc * inv)
    return out_arr


def nms(const double[:, ::1] xyxy, const cnp.int64_t[::1] order, double iou_thr, int keep):
    cdef Py_ssize_t n = order.shape[0], i, j, a, b
    cdef unsigned char[::1] dead = np.zeros(n, dtype=np.uint8)
    kept = np.empty(min(n, max(keep, 0)), dtype=np.int64)
    cdef cnp.int64_t[::1] kv = kept
    cdef Py_ssize_t nk = 0
    cdef double iw, ih, inter, area_a, area_b
    with nogil:
        for i in range(n):
            if nk >= keep:
                break
            if dead[i]:
                continue
            a = order[i]
            kv[nk] = a
            nk += 1
            area_a = (xyxy[a, 2] - xyxy[a, 0]) * (xyxy[a, 3] - xyxy[a, 1])
            for j in range(i + 1, n):
                if dead[j]:
                    continue
                b = order[j]
                iw = min(xyxy[a, 2], xyxy[b, 2]) - max(xyxy[a, 0], xyxy[b, 0])
                ih = min(xyxy[a, 3], xyxy[b, 3]) - max(xyxy[a, 1], xyxy[b, 1])
                if iw <= 0 or ih <= 0:
                    continue
                inter = iw * ih
                area_b = (xyxy[b, 2] - xyxy[b, 0]) * (xyxy[b, 3] - xyxy[b, 1])
                if inter / (area_a + area_b - inter) > iou_thr:
                    dead[j] = 1
    return kept[:nk]


def ncc(const float[:, :, ::1] template, const float[:, :, ::1] search):
    cdef Py_ssize_t nc = template.shape[0], th = template.shape[1], tw = template.shape[2]
    cdef Py_ssize_t oh = search.shape[1] - th + 1, ow = search.shape[2] - tw + 1
    cdef double n = th * tw
    t_arr = np.asarray(template, dtype=np.float64)
    t_arr = t_arr - t_arr.mean(axis=(1, 2), keepdims=True)
    cdef double[:, :, ::1] t = np.ascontiguousarray(t_arr)
    cdef double tnorm = sqrt(float((t_arr * t_arr).sum()))
    out_arr = np.zeros((oh, ow), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    cdef Py_ssize_t u, v, c, i, j
    cdef double num, var, total, s, ssum, ssq, den, val
    with nogil:
        for u in range(oh):
            for v in range(ow):
                num = 0.0
                var = 0.0
                total = 0.0
                for c in range(nc):
                    ssum = 0.0
                    ssq = 0.0
                    for i in range(th):
                        for j in range(tw):
                            s = search[c, u + i, v + j]
                            ssum += s
                            ssq += s * s
                            num += t[c, i, j] * s
                    var += ssq - ssum * ssum / n
                    total += ssq
                if var < 0:
                    var = 0.0
                den = tnorm * sqrt(var)
                if var <= 1e-9 * total or den <= 0.0:
                    val = 0.0
                else:
                    val = num / den
                    if val > 1.0:
                        val = 1.0
                    elif val < -1.0:
                        val = -1.0
                out[u, v] = val
    return out_arr


def sample_grid(const float[:, :, ::1] img, ys, xs, pad):
    cdef double[::1] yv = np.ascontiguousarray(ys, dtype=np.float64)
    cdef double[::1] xv = np.ascontiguousarray(xs, dtype=np.float64)
    cdef double[::1] pv = np.ascontiguousarray(pad, dtype=np.float64).reshape(-1)
    cdef Py_ssize_t nc = img.shape[0], h = img.shape[1], w = img.shape[2]
    cdef Py_ssize_t oh = yv.shape[0], ow = xv.shape[0]
    out_arr = np.empty((nc, oh, ow), dtype=np.float32)
    cdef float[:, :, ::1] out = out_arr
    cdef Py_ssize_t c, i, j, y0, x0
    cdef double fy, fx, ly, lx, acc, p
    with nogil:
        for c in range(nc):
            p = pv[c]
            for i in range(oh):
                fy = floor(yv[i])
                y0 = <Py_ssize_t>fy
                ly = yv[i] - fy
                for j in range(ow):
                    fx = floor(xv[j])
                    x0 = <Py_ssize_t>fx
                    lx = xv[j] - fx
                    acc = 0.0
                    if 0 <= y0 < h:
                        if 0 <= x0 < w:
                            acc += (1.0 - ly) * (1.0 - lx) * (img[c, y0, x0] - p)
                        if 0 <= x0 + 1 < w:
                            acc += (1.0 - ly) * lx * (img[c, y0, x0 + 1] - p)
                    if 0 <= y0 + 1 < h:
                        if 0 <= x0 < w:
                            acc += ly * (1.0 - lx) * (img[c, y0 + 1, x0] - p)
                        if 0 <= x0 + 1 < w:
                            acc += ly * lx * (img[c, y0 + 1, x0 + 1] - p)
                    out[c, i, j] = <float>(acc + p)
    return out_arr
