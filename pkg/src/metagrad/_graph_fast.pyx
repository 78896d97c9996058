# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled evaluation backend for the computation graph.

Same node semantics as ``_graph_py``; node values live in one flat
float64 arena and the forward sweep runs as C loops. Only evaluation is
compiled; graph construction and differentiation stay in Python.
"""

from cpython.mem cimport PyMem_Free, PyMem_Malloc, PyMem_Realloc
from libc.math cimport exp as cexp, fabs, log as clog, log1p, tanh as ctanh
from libc.string cimport memcpy, memset

import numpy as np

from .errors import ConfigurationError

cdef enum:
    LEAF = 0
    ADD = 1
    SUB = 2
    MUL = 3
    SCAL_MUL = 4
    SCAL_ADD = 5
    MATMUL = 6
    TRANSPOSE = 7
    SUM_ALL = 8
    SUM_ROWS = 9
    SUM_COLS = 10
    BCAST_S = 11
    BCAST_ROWS = 12
    BCAST_COLS = 13
    RESHAPE = 14
    EXP = 15
    LOG = 16
    TANH = 17
    SIGMOID = 18
    RELU = 19
    STEP = 20
    SOFTPLUS = 21
    RECIP = 22
    STOPGRAD = 23
    ROWMAX = 24
    CONCAT0 = 25
    SLICE0 = 26
    PAD0 = 27


cdef class GraphCore:
    cdef long n, cap
    cdef long arena_used, arena_cap
    cdef int* op
    cdef long* pa
    cdef long* pb
    cdef long* i0
    cdef long* i1
    cdef double* fattr
    cdef int* rows
    cdef int* cols
    cdef long* off
    cdef char* bound
    cdef double* arena
    cdef long clean

    def __cinit__(self):
        self.n = 0
        self.cap = 256
        self.arena_used = 0
        self.arena_cap = 4096
        self.clean = 0
        self.op = <int*> PyMem_Malloc(self.cap * sizeof(int))
        self.pa = <long*> PyMem_Malloc(self.cap * sizeof(long))
        self.pb = <long*> PyMem_Malloc(self.cap * sizeof(long))
        self.i0 = <long*> PyMem_Malloc(self.cap * sizeof(long))
        self.i1 = <long*> PyMem_Malloc(self.cap * sizeof(long))
        self.fattr = <double*> PyMem_Malloc(self.cap * sizeof(double))
        self.rows = <int*> PyMem_Malloc(self.cap * sizeof(int))
        self.cols = <int*> PyMem_Malloc(self.cap * sizeof(int))
        self.off = <long*> PyMem_Malloc(self.cap * sizeof(long))
        self.bound = <char*> PyMem_Malloc(self.cap * sizeof(char))
        self.arena = <double*> PyMem_Malloc(self.arena_cap * sizeof(double))
        if (self.op == NULL or self.pa == NULL or self.pb == NULL
                or self.i0 == NULL or self.i1 == NULL or self.fattr == NULL
                or self.rows == NULL or self.cols == NULL or self.off == NULL
                or self.bound == NULL or self.arena == NULL):
            raise MemoryError()

    def __dealloc__(self):
        PyMem_Free(self.op)
        PyMem_Free(self.pa)
        PyMem_Free(self.pb)
        PyMem_Free(self.i0)
        PyMem_Free(self.i1)
        PyMem_Free(self.fattr)
        PyMem_Free(self.rows)
        PyMem_Free(self.cols)
        PyMem_Free(self.off)
        PyMem_Free(self.bound)
        PyMem_Free(self.arena)

    def __len__(self):
        return self.n

    cdef int _grow_nodes(self) except -1:
        cdef long newcap = self.cap * 2
        self.op = <int*> PyMem_Realloc(self.op, newcap * sizeof(int))
        self.pa = <long*> PyMem_Realloc(self.pa, newcap * sizeof(long))
        self.pb = <long*> PyMem_Realloc(self.pb, newcap * sizeof(long))
        self.i0 = <long*> PyMem_Realloc(self.i0, newcap * sizeof(long))
        self.i1 = <long*> PyMem_Realloc(self.i1, newcap * sizeof(long))
        self.fattr = <double*> PyMem_Realloc(self.fattr, newcap * sizeof(double))
        self.rows = <int*> PyMem_Realloc(self.rows, newcap * sizeof(int))
        self.cols = <int*> PyMem_Realloc(self.cols, newcap * sizeof(int))
        self.off = <long*> PyMem_Realloc(self.off, newcap * sizeof(long))
        self.bound = <char*> PyMem_Realloc(self.bound, newcap * sizeof(char))
        if (self.op == NULL or self.pa == NULL or self.pb == NULL
                or self.i0 == NULL or self.i1 == NULL or self.fattr == NULL
                or self.rows == NULL or self.cols == NULL or self.off == NULL
                or self.bound == NULL):
            raise MemoryError()
        self.cap = newcap
        return 0

    cdef int _grow_arena(self, long need) except -1:
        cdef long newcap = self.arena_cap
        while newcap < need:
            newcap *= 2
        self.arena = <double*> PyMem_Realloc(self.arena, newcap * sizeof(double))
        if self.arena == NULL:
            raise MemoryError()
        self.arena_cap = newcap
        return 0

    cpdef long add(self, int op, long a, long b, long i0, long i1,
                   double f, int r, int c):
        cdef long nid = self.n
        cdef long size = <long> r * c
        if nid >= self.cap:
            self._grow_nodes()
        if self.arena_used + size > self.arena_cap:
            self._grow_arena(self.arena_used + size)
        self.op[nid] = op
        self.pa[nid] = a
        self.pb[nid] = b
        self.i0[nid] = i0
        self.i1[nid] = i1
        self.fattr[nid] = f
        self.rows[nid] = r
        self.cols[nid] = c
        self.off[nid] = self.arena_used
        self.bound[nid] = 0
        self.arena_used += size
        self.n += 1
        return nid

    def bind(self, long nid, arr):
        cdef double[:, ::1] mv = np.ascontiguousarray(arr, dtype=np.float64).reshape(
            self.rows[nid], self.cols[nid]
        )
        cdef long size = <long> self.rows[nid] * self.cols[nid]
        memcpy(self.arena + self.off[nid], &mv[0, 0], size * sizeof(double))
        self.bound[nid] = 1
        if nid < self.clean:
            self.clean = nid
        if self.clean == nid:
            self.clean = nid + 1

    def value(self, long nid):
        """Forward value of node nid as a fresh numpy array."""
        if nid >= self.clean:
            self._run(self.clean, nid + 1)
            self.clean = nid + 1
        out = np.empty((self.rows[nid], self.cols[nid]), dtype=np.float64)
        cdef double[:, ::1] mv = out
        cdef long size = <long> self.rows[nid] * self.cols[nid]
        memcpy(&mv[0, 0], self.arena + self.off[nid], size * sizeof(double))
        return out

    def run_all(self):
        self._run(self.clean, self.n)
        self.clean = self.n

    cdef int _run(self, long start, long stop) except -1:
        cdef long nid, i, j, k, size, ra, ca, rb, cb
        cdef int kop
        cdef double s, x
        cdef double* v
        cdef double* a
        cdef double* b
        for nid in range(start, stop):
            kop = self.op[nid]
            size = <long> self.rows[nid] * self.cols[nid]
            v = self.arena + self.off[nid]
            if kop == LEAF:
                if not self.bound[nid]:
                    raise ConfigurationError(f"unbound parameter at node {nid}")
                continue
            a = self.arena + self.off[self.pa[nid]]
            ra = self.rows[self.pa[nid]]
            ca = self.cols[self.pa[nid]]
            if kop == ADD:
                b = self.arena + self.off[self.pb[nid]]
                for i in range(size):
                    v[i] = a[i] + b[i]
            elif kop == SUB:
                b = self.arena + self.off[self.pb[nid]]
                for i in range(size):
                    v[i] = a[i] - b[i]
            elif kop == MUL:
                b = self.arena + self.off[self.pb[nid]]
                for i in range(size):
                    v[i] = a[i] * b[i]
            elif kop == SCAL_MUL:
                x = self.fattr[nid]
                for i in range(size):
                    v[i] = a[i] * x
            elif kop == SCAL_ADD:
                x = self.fattr[nid]
                for i in range(size):
                    v[i] = a[i] + x
            elif kop == MATMUL:
                b = self.arena + self.off[self.pb[nid]]
                rb = self.rows[self.pb[nid]]
                cb = self.cols[self.pb[nid]]
                for i in range(ra):
                    for j in range(cb):
                        s = 0.0
                        for k in range(ca):
                            s += a[i * ca + k] * b[k * cb + j]
                        v[i * cb + j] = s
            elif kop == TRANSPOSE:
                for i in range(ra):
                    for j in range(ca):
                        v[j * ra + i] = a[i * ca + j]
            elif kop == SUM_ALL:
                s = 0.0
                for i in range(ra * ca):
                    s += a[i]
                v[0] = s
            elif kop == SUM_ROWS:
                for j in range(ca):
                    v[j] = 0.0
                for i in range(ra):
                    for j in range(ca):
                        v[j] += a[i * ca + j]
            elif kop == SUM_COLS:
                for i in range(ra):
                    s = 0.0
                    for j in range(ca):
                        s += a[i * ca + j]
                    v[i] = s
            elif kop == BCAST_S:
                x = a[0]
                for i in range(size):
                    v[i] = x
            elif kop == BCAST_ROWS:
                for i in range(self.rows[nid]):
                    memcpy(v + i * ca, a, ca * sizeof(double))
            elif kop == BCAST_COLS:
                for i in range(ra):
                    x = a[i]
                    for j in range(self.cols[nid]):
                        v[i * self.cols[nid] + j] = x
            elif kop == RESHAPE or kop == STOPGRAD:
                memcpy(v, a, size * sizeof(double))
            elif kop == EXP:
                for i in range(size):
                    v[i] = cexp(a[i])
            elif kop == LOG:
                for i in range(size):
                    v[i] = clog(a[i])
            elif kop == TANH:
                for i in range(size):
                    v[i] = ctanh(a[i])
            elif kop == SIGMOID:
                for i in range(size):
                    x = a[i]
                    if x >= 0.0:
                        v[i] = 1.0 / (1.0 + cexp(-x))
                    else:
                        s = cexp(x)
                        v[i] = s / (1.0 + s)
            elif kop == RELU:
                for i in range(size):
                    x = a[i]
                    v[i] = x if x > 0.0 else 0.0
            elif kop == STEP:
                for i in range(size):
                    v[i] = 1.0 if a[i] > 0.0 else 0.0
            elif kop == SOFTPLUS:
                for i in range(size):
                    x = a[i]
                    s = x if x > 0.0 else 0.0
                    v[i] = s + log1p(cexp(-fabs(x)))
            elif kop == RECIP:
                for i in range(size):
                    v[i] = 1.0 / a[i]
            elif kop == ROWMAX:
                for i in range(ra):
                    s = a[i * ca]
                    for j in range(1, ca):
                        if a[i * ca + j] > s:
                            s = a[i * ca + j]
                    v[i] = s
            elif kop == CONCAT0:
                b = self.arena + self.off[self.pb[nid]]
                rb = self.rows[self.pb[nid]]
                memcpy(v, a, ra * ca * sizeof(double))
                memcpy(v + ra * ca, b, rb * ca * sizeof(double))
            elif kop == SLICE0:
                memcpy(v, a + self.i0[nid] * ca,
                       (self.i1[nid] - self.i0[nid]) * ca * sizeof(double))
            elif kop == PAD0:
                memset(v, 0, size * sizeof(double))
                memcpy(v + self.i0[nid] * ca, a, ra * ca * sizeof(double))
            else:
                raise ConfigurationError(f"unknown opcode {kop}")
        return 0
