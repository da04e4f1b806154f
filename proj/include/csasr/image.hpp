#pragma once

#include <cstdint>
#include <limits>
#include <string>
#include <vector>

#include "csasr/tensor.hpp"

namespace csasr {

/// Interleaved 8-bit RGB image, as stored on disk.
struct ImageU8 {
    int width = 0;
    int height = 0;
    int channels = 3;
    std::vector<std::uint8_t> pixels;  // height*width*channels, row-major, RGB

    void validate() const {
        if (width < 1 || height < 1 || channels != 3 ||
            pixels.size() != static_cast<std::size_t>(width) * height * channels) {
            throw ValueError("image_u8: inconsistent dimensions");
        }
    }
};

/// Planar real-valued image in [0,1], shape (C,H,W), the model-side
/// representation. Conversion from 8-bit is v/255 exactly.
struct ImageF32 {
    int channels = 0;
    int height = 0;
    int width = 0;
    std::vector<float> samples;  // planar C,H,W

    float at(int c, int y, int x) const {
        return samples[(static_cast<std::size_t>(c) * height + y) * width + x];
    }
    float& at(int c, int y, int x) {
        return samples[(static_cast<std::size_t>(c) * height + y) * width + x];
    }
};

/// Aligned degradation pair; hr dims are exactly scale x lr dims.
struct SamplePair {
    ImageF32 lr;
    ImageF32 hr;
    std::string image_path;  // provenance
    int crop_y = 0;
    int crop_x = 0;
};

ImageU8 load_image(const std::string& path);
void save_image(const std::string& path, const ImageU8& img);

ImageF32 to_f32(const ImageU8& img);
/// Clamps to [0,1] and quantizes with round-half-away-from-zero.
ImageU8 to_u8(const ImageF32& img);

/// Separable cubic-convolution resampling (a = -0.5, half-pixel-centered
/// mapping, edge-clamped), usable for both down- and up-scaling.
ImageF32 bicubic_resize(const ImageF32& img, int out_h, int out_w);

/// 10*log10(peak^2 / MSE) over all channels and pixels; +inf when MSE==0.
double psnr(const ImageF32& a, const ImageF32& b, double peak);

/// Single-scale SSIM: 11x11 Gaussian window sigma 1.5, K1=0.01, K2=0.03,
/// dynamic range 1.0, per channel, mean over fully-interior windows.
double ssim(const ImageF32& a, const ImageF32& b);

/// Center-crops hr to the largest multiple of scale, then downscales by
/// exactly 1/scale.
SamplePair degrade(const ImageF32& hr, int scale);

ImageF32 center_crop_to_multiple(const ImageF32& img, int multiple);
ImageF32 crop(const ImageF32& img, int y, int x, int h, int w);

inline constexpr double kPsnrInf = std::numeric_limits<double>::infinity();

}  // namespace csasr
