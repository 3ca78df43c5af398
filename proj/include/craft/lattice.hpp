#pragma once

// Periodic 2-D lattice helpers. Fields are stored flattened row-major:
// site (row, col) lives at index row * side + col.

#include "craft/core.hpp"

#include <stdexcept>

namespace craft {

struct Lattice {
  int side = 0;

  int volume() const noexcept { return side * side; }

  int wrap(int i) const noexcept {
    const int r = i % side;
    return r < 0 ? r + side : r;
  }
  int index(int row, int col) const noexcept { return wrap(row) * side + wrap(col); }
  int parity(int site) const noexcept { return (site / side + site % side) % 2; }
};

inline Lattice lattice_for(Eigen::Index dim) {
  int side = 0;
  while (static_cast<Eigen::Index>(side) * side < dim) ++side;
  if (static_cast<Eigen::Index>(side) * side != dim || side < 1)
    throw std::invalid_argument("field length is not a square lattice");
  return Lattice{side};
}

/// Cyclic shift: out(row + shift_row, col + shift_col) = field(row, col).
inline Vec translate_lattice(const Vec& field, int shift_row, int shift_col) {
  const Lattice lat = lattice_for(field.size());
  Vec out(field.size());
  for (int r = 0; r < lat.side; ++r)
    for (int c = 0; c < lat.side; ++c) out[lat.index(r + shift_row, c + shift_col)] = field[lat.index(r, c)];
  return out;
}

}  // namespace craft
