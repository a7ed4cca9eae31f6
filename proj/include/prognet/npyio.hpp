#pragma once

#include <string>
#include <vector>

#include "prognet/image.hpp"

namespace prognet {

// Reads a uint8 .npy array of shape (N,H,W) or (N,H,W,1) as images.
std::vector<ImageU8> read_npy_images(const std::string& path);

// Reads one member (default: the first ending in .npy) out of a .npz archive.
// Handles stored and deflate members.
std::vector<ImageU8> read_npz_images(const std::string& path, const std::string& member = "");

}  // namespace prognet
