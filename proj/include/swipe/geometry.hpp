#ifndef SWIPE_GEOMETRY_HPP
#define SWIPE_GEOMETRY_HPP

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include "common.hpp"

// Normalized coordinate system and patch grid arithmetic.
//
// Coordinate components follow raster axis order: component 0 is the row
// axis, component 1 the column axis (and component 2 the slice axis in 3D).
// A pixel index i on an axis of length N maps to the pixel center
// c = -1 + 2 (i + 0.5) / N, so every image coordinate lies in [-1, 1].

namespace swipe::geometry {

template <std::size_t Dim>
using Coord = std::array<double, Dim>;

using Coord2 = Coord<2>;
using Coord3 = Coord<3>;

template <std::size_t Dim>
using PixelIndex = std::array<int, Dim>;

enum class Connectivity : int {
    Four = 4,
    Eight = 8,
    Six = 6,
    TwentySix = 26,
};

inline int connectivity_count(Connectivity con) { return static_cast<int>(con); }

inline Connectivity connectivity_from_int(int value)
{
    switch (value) {
    case 4: return Connectivity::Four;
    case 8: return Connectivity::Eight;
    case 6: return Connectivity::Six;
    case 26: return Connectivity::TwentySix;
    default: throw ConfigError("connectivity must be one of 4, 8 (2D) or 6, 26 (3D), got " + std::to_string(value));
    }
}

/// Index of one cell of the patch grid.
template <std::size_t Dim>
struct PatchIndex {
    std::array<int, Dim> cell{};

    int& operator[](std::size_t axis) { return cell[axis]; }
    int operator[](std::size_t axis) const { return cell[axis]; }
    friend bool operator==(const PatchIndex&, const PatchIndex&) = default;
    friend auto operator<=>(const PatchIndex&, const PatchIndex&) = default;
};

/// Non-overlapping isotropic grid of S-pixel cells over an image.
/// Cells on the trailing edge are truncated when S does not divide the extent.
template <std::size_t Dim>
class PatchGridSpec {
public:
    PatchGridSpec() = default;

    PatchGridSpec(std::array<int, Dim> extent, int patch_size) : extent_(extent), patch_size_(patch_size)
    {
        if (patch_size_ < 1) {
            throw ConfigError("patch size must be >= 1");
        }
        for (std::size_t a = 0; a < Dim; ++a) {
            if (extent_[a] < 1) {
                throw ConfigError("image extent must be >= 1 on every axis");
            }
            if (patch_size_ > extent_[a]) {
                throw ConfigError("patch size " + std::to_string(patch_size_) + " exceeds image extent " +
                                  std::to_string(extent_[a]));
            }
            cells_[a] = (extent_[a] + patch_size_ - 1) / patch_size_;
        }
    }

    const std::array<int, Dim>& extent() const { return extent_; }
    const std::array<int, Dim>& cells() const { return cells_; }
    int patch_size() const { return patch_size_; }

    int patch_count() const
    {
        int n = 1;
        for (int c : cells_) {
            n *= c;
        }
        return n;
    }

    bool contains(const PatchIndex<Dim>& index) const
    {
        for (std::size_t a = 0; a < Dim; ++a) {
            if (index[a] < 0 || index[a] >= cells_[a]) {
                return false;
            }
        }
        return true;
    }

    /// Row-major flat offset of a cell (matches the row order of Z^P).
    int flat(const PatchIndex<Dim>& index) const
    {
        int off = 0;
        for (std::size_t a = 0; a < Dim; ++a) {
            off = off * cells_[a] + index[a];
        }
        return off;
    }

    PatchIndex<Dim> unflat(int offset) const
    {
        PatchIndex<Dim> index;
        for (std::size_t a = Dim; a-- > 0;) {
            index[a] = offset % cells_[a];
            offset /= cells_[a];
        }
        return index;
    }

    /// Half of one cell's extent in normalized units, per axis (S / N).
    Coord<Dim> half_extent() const
    {
        Coord<Dim> h{};
        for (std::size_t a = 0; a < Dim; ++a) {
            h[a] = static_cast<double>(patch_size_) / extent_[a];
        }
        return h;
    }

    friend bool operator==(const PatchGridSpec&, const PatchGridSpec&) = default;

private:
    std::array<int, Dim> extent_{};
    int patch_size_ = 1;
    std::array<int, Dim> cells_{};
};

using PatchGrid2 = PatchGridSpec<2>;
using PatchIndex2 = PatchIndex<2>;

inline double pixel_to_normalized(double index, int length)
{
    return -1.0 + 2.0 * (index + 0.5) / length;
}

inline int normalized_to_pixel(double coord, int length)
{
    return static_cast<int>(std::lround((coord + 1.0) * 0.5 * length - 0.5));
}

template <std::size_t Dim>
Coord<Dim> pixel_to_normalized(const PixelIndex<Dim>& pixel, const std::array<int, Dim>& extent)
{
    Coord<Dim> c{};
    for (std::size_t a = 0; a < Dim; ++a) {
        if (pixel[a] < 0 || pixel[a] >= extent[a]) {
            throw BoundsError("pixel index " + std::to_string(pixel[a]) + " outside [0, " +
                              std::to_string(extent[a]) + ")");
        }
        c[a] = pixel_to_normalized(static_cast<double>(pixel[a]), extent[a]);
    }
    return c;
}

inline Coord2 pixel_to_normalized(int row, int col, int height, int width)
{
    return pixel_to_normalized<2>({row, col}, {height, width});
}

/// Inverse of pixel_to_normalized for coordinates on pixel centers; other
/// coordinates snap to the pixel whose extent contains them.
template <std::size_t Dim>
PixelIndex<Dim> normalized_to_pixel(const Coord<Dim>& coord, const std::array<int, Dim>& extent)
{
    PixelIndex<Dim> p{};
    for (std::size_t a = 0; a < Dim; ++a) {
        p[a] = std::clamp(normalized_to_pixel(coord[a], extent[a]), 0, extent[a] - 1);
    }
    return p;
}

/// Cell containing p_I. Coordinates on interior cell boundaries go to the
/// higher-index cell; +1 clamps into the last cell.
template <std::size_t Dim>
PatchIndex<Dim> patch_of(const Coord<Dim>& p, const PatchGridSpec<Dim>& grid)
{
    PatchIndex<Dim> index;
    for (std::size_t a = 0; a < Dim; ++a) {
        const double u = (p[a] + 1.0) * 0.5 * grid.extent()[a];
        const int cell = static_cast<int>(std::floor(u / grid.patch_size()));
        index[a] = std::clamp(cell, 0, grid.cells()[a] - 1);
    }
    return index;
}

/// Geometric center of a cell; truncated edge cells use the truncated extent.
template <std::size_t Dim>
Coord<Dim> center_of(const PatchIndex<Dim>& index, const PatchGridSpec<Dim>& grid)
{
    if (!grid.contains(index)) {
        throw BoundsError("patch index outside the grid");
    }
    Coord<Dim> c{};
    for (std::size_t a = 0; a < Dim; ++a) {
        const int lo = index[a] * grid.patch_size();
        const int hi = std::min(lo + grid.patch_size(), grid.extent()[a]);
        c[a] = -1.0 + static_cast<double>(lo + hi) / grid.extent()[a];
    }
    return c;
}

template <std::size_t Dim>
Coord<Dim> to_patch_local(const Coord<Dim>& p_image, const Coord<Dim>& center)
{
    Coord<Dim> out{};
    for (std::size_t a = 0; a < Dim; ++a) {
        out[a] = p_image[a] - center[a];
    }
    return out;
}

/// Optional experiment: rescale a patch-local coordinate so one cell spans [-1, 1].
template <std::size_t Dim>
Coord<Dim> rescale_patch_local(const Coord<Dim>& local, const PatchGridSpec<Dim>& grid)
{
    Coord<Dim> out{};
    const auto half = grid.half_extent();
    for (std::size_t a = 0; a < Dim; ++a) {
        out[a] = local[a] / half[a];
    }
    return out;
}

template <std::size_t Dim>
std::vector<std::array<int, Dim>> neighbor_offsets(Connectivity con)
{
    const bool face_only = (Dim == 2 && con == Connectivity::Four) || (Dim == 3 && con == Connectivity::Six);
    const bool full = (Dim == 2 && con == Connectivity::Eight) || (Dim == 3 && con == Connectivity::TwentySix);
    if (!face_only && !full) {
        throw ConfigError("connectivity " + std::to_string(connectivity_count(con)) + " is not valid in " +
                          std::to_string(Dim) + "D");
    }
    std::vector<std::array<int, Dim>> offsets;
    std::array<int, Dim> off{};
    off.fill(-1);
    while (true) {
        int nonzero = 0;
        for (int v : off) {
            nonzero += v != 0;
        }
        if (nonzero > 0 && (full || nonzero == 1)) {
            offsets.push_back(off);
        }
        std::size_t a = Dim;
        while (a > 0) {
            --a;
            if (off[a] < 1) {
                ++off[a];
                break;
            }
            off[a] = -1;
            if (a == 0) {
                return offsets;
            }
        }
    }
}

/// In-bounds neighbors in a fixed order (lexicographic offset order).
template <std::size_t Dim>
std::vector<PatchIndex<Dim>> neighbors(const PatchIndex<Dim>& index, const PatchGridSpec<Dim>& grid,
                                       Connectivity con)
{
    if (!grid.contains(index)) {
        throw BoundsError("patch index outside the grid");
    }
    std::vector<PatchIndex<Dim>> out;
    for (const auto& off : neighbor_offsets<Dim>(con)) {
        PatchIndex<Dim> n = index;
        for (std::size_t a = 0; a < Dim; ++a) {
            n[a] += off[a];
        }
        if (grid.contains(n)) {
            out.push_back(n);
        }
    }
    return out;
}

} // namespace swipe::geometry

#endif
