#pragma once

#include "memflow/common.hpp"

#include <limits>
#include <vector>

namespace memflow {

/// Exact solution of the dense square linear assignment problem
/// (Jonker-Volgenant shortest augmenting path, O(n^3) worst case, much faster
/// on near-diagonal instances). `cost` is row-major n x n. Returns the column
/// assigned to each row; the optimum equals sum_i cost[i][row_to_col[i]].
struct AssignmentResult {
    std::vector<int> row_to_col;
    double total = 0.0;
};

inline AssignmentResult solve_assignment(const std::vector<double>& cost, int n) {
    require(n >= 1, ErrorKind::Domain, "assignment needs n >= 1");
    require(cost.size() == static_cast<std::size_t>(n) * n, ErrorKind::Shape,
            "cost matrix size mismatch");
    const double big = std::numeric_limits<double>::infinity();
    auto c = [&](int i, int j) -> double { return cost[static_cast<std::size_t>(i) * n + j]; };

    std::vector<int> rowsol(n, -1), colsol(n, -1), free_rows(n), matches(n, 0);
    std::vector<double> u(n, 0.0), v(n, 0.0);

    // Column reduction (reverse column order).
    for (int j = n - 1; j >= 0; --j) {
        double mn = c(0, j);
        int imin = 0;
        for (int i = 1; i < n; ++i)
            if (c(i, j) < mn) { mn = c(i, j); imin = i; }
        v[j] = mn;
        if (++matches[imin] == 1) {
            rowsol[imin] = j;
            colsol[j] = imin;
        } else {
            colsol[j] = -1;
        }
    }

    // Reduction transfer.
    int numfree = 0;
    for (int i = 0; i < n; ++i) {
        if (matches[i] == 0) {
            free_rows[numfree++] = i;
        } else if (matches[i] == 1) {
            int j1 = rowsol[i];
            double mn = big;
            for (int j = 0; j < n; ++j)
                if (j != j1) mn = std::min(mn, c(i, j) - v[j]);
            if (mn < big) v[j1] -= mn;
        }
    }

    // Augmenting row reduction, two sweeps. A dual decrement below the ulp of
    // v[j] makes no progress in floating point and would let two rows contest
    // one column forever, so absorbed decrements are treated as exact ties and
    // an iteration budget spills pathological instances to the exact
    // augmentation phase below, which always terminates.
    std::vector<int> cur(free_rows.begin(), free_rows.begin() + numfree), next;
    long budget = 16L * n + 64;
    for (int sweep = 0; sweep < 2 && !cur.empty() && budget >= 0; ++sweep) {
        std::size_t k = 0;
        next.clear();
        while (k < cur.size()) {
            if (--budget < 0) break;
            int i = cur[k++];
            double umin = c(i, 0) - v[0];
            int j1 = 0, j2 = -1;
            double usubmin = big;
            for (int j = 1; j < n; ++j) {
                double hh = c(i, j) - v[j];
                if (hh < usubmin) {
                    if (hh >= umin) {
                        usubmin = hh;
                        j2 = j;
                    } else {
                        usubmin = umin;
                        umin = hh;
                        j2 = j1;
                        j1 = j;
                    }
                }
            }
            int i0 = colsol[j1];
            bool progressed = false;
            if (umin < usubmin && usubmin < big) {
                double nv = v[j1] - (usubmin - umin);
                if (nv != v[j1]) {
                    v[j1] = nv;
                    progressed = true;
                }
            }
            if (!progressed && i0 >= 0 && j2 >= 0) {
                j1 = j2;
                i0 = colsol[j1];
            }
            rowsol[i] = j1;
            colsol[j1] = i;
            if (i0 >= 0) {
                if (progressed)
                    cur[--k] = i0;  // retry the displaced row immediately
                else
                    next.push_back(i0);  // defer to the next sweep
            }
        }
        for (; k < cur.size(); ++k) next.push_back(cur[k]);  // budget spill
        std::swap(cur, next);
    }
    numfree = static_cast<int>(cur.size());
    for (int f = 0; f < numfree; ++f) free_rows[static_cast<std::size_t>(f)] = cur[static_cast<std::size_t>(f)];

    // Augmentation via shortest alternating paths for the remaining rows.
    std::vector<double> d(n);
    std::vector<int> pred(n), collist(n);
    for (int f = 0; f < numfree; ++f) {
        int freerow = free_rows[f];
        for (int j = 0; j < n; ++j) {
            d[j] = c(freerow, j) - v[j];
            pred[j] = freerow;
            collist[j] = j;
        }
        int low = 0, up = 0, last = -1, endofpath = -1;
        double mn = 0.0;
        bool found = false;
        do {
            if (up == low) {
                last = low - 1;
                mn = d[collist[up++]];
                for (int k = up; k < n; ++k) {
                    int j = collist[k];
                    double hh = d[j];
                    if (hh <= mn) {
                        if (hh < mn) {
                            up = low;
                            mn = hh;
                        }
                        collist[k] = collist[up];
                        collist[up++] = j;
                    }
                }
                for (int k = low; k < up; ++k)
                    if (colsol[collist[k]] < 0) {
                        endofpath = collist[k];
                        found = true;
                        break;
                    }
            }
            if (!found) {
                int j1 = collist[low++];
                int i = colsol[j1];
                double hh = c(i, j1) - v[j1] - mn;
                for (int k = up; k < n; ++k) {
                    int j = collist[k];
                    double v2 = c(i, j) - v[j] - hh;
                    if (v2 < d[j]) {
                        pred[j] = i;
                        if (v2 == mn) {
                            if (colsol[j] < 0) {
                                endofpath = j;
                                found = true;
                                break;
                            }
                            collist[k] = collist[up];
                            collist[up++] = j;
                        }
                        d[j] = v2;
                    }
                }
            }
        } while (!found);
        for (int k = 0; k <= last; ++k) {
            int j1 = collist[k];
            v[j1] += d[j1] - mn;
        }
        int i;
        do {
            i = pred[endofpath];
            colsol[endofpath] = i;
            int j1 = endofpath;
            endofpath = rowsol[i];
            rowsol[i] = j1;
        } while (i != freerow);
    }

    AssignmentResult res;
    res.row_to_col = rowsol;
    for (int i = 0; i < n; ++i) res.total += c(i, rowsol[i]);
    return res;
}

}  // namespace memflow
