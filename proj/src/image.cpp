#include "csasr/image.hpp"

#include <array>
#include <cmath>
#include <filesystem>
#include <fstream>

#include <opencv2/core.hpp>
#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include "csasr/detail/cubic.hpp"

namespace csasr {

ImageU8 load_image(const std::string& path) {
    namespace fs = std::filesystem;
    std::error_code ec;
    if (!fs::exists(path, ec)) throw IoError("image: file not found: " + path);
    {
        std::ifstream probe(path, std::ios::binary);
        if (!probe.good()) throw IoError("image: unreadable file: " + path);
    }
    cv::Mat raw = cv::imread(path, cv::IMREAD_UNCHANGED);
    if (raw.empty()) throw IoError("image: undecodable or truncated raster file: " + path);
    if (raw.depth() != CV_8U) {
        throw IoError("image: unsupported bit depth (only 8-bit samples) in " + path);
    }

    cv::Mat rgb;
    switch (raw.channels()) {
        case 1: {
            // Gray images expand to three identical channels.
            cv::Mat tmp;
            cv::merge(std::vector<cv::Mat>{raw, raw, raw}, tmp);
            rgb = tmp;
            break;
        }
        case 3:
            cv::cvtColor(raw, rgb, cv::COLOR_BGR2RGB);
            break;
        case 4: {
            cv::Mat bgr;
            cv::cvtColor(raw, bgr, cv::COLOR_BGRA2BGR);
            cv::cvtColor(bgr, rgb, cv::COLOR_BGR2RGB);
            break;
        }
        default:
            throw IoError("image: unsupported channel count " + std::to_string(raw.channels()) + " in " + path);
    }

    ImageU8 img;
    img.width = rgb.cols;
    img.height = rgb.rows;
    img.channels = 3;
    img.pixels.resize(static_cast<std::size_t>(img.width) * img.height * 3);
    for (int y = 0; y < img.height; ++y) {
        const std::uint8_t* row = rgb.ptr<std::uint8_t>(y);
        std::copy(row, row + static_cast<std::size_t>(img.width) * 3,
                  img.pixels.begin() + static_cast<std::size_t>(y) * img.width * 3);
    }
    img.validate();
    return img;
}

void save_image(const std::string& path, const ImageU8& img) {
    img.validate();
    cv::Mat rgb(img.height, img.width, CV_8UC3, const_cast<std::uint8_t*>(img.pixels.data()));
    cv::Mat bgr;
    cv::cvtColor(rgb, bgr, cv::COLOR_RGB2BGR);
    if (!cv::imwrite(path, bgr)) throw IoError("image: cannot write " + path);
}

ImageF32 to_f32(const ImageU8& img) {
    img.validate();
    ImageF32 out;
    out.channels = 3;
    out.height = img.height;
    out.width = img.width;
    out.samples.resize(static_cast<std::size_t>(3) * img.height * img.width);
    for (int y = 0; y < img.height; ++y)
        for (int x = 0; x < img.width; ++x)
            for (int c = 0; c < 3; ++c)
                out.at(c, y, x) =
                    static_cast<float>(img.pixels[(static_cast<std::size_t>(y) * img.width + x) * 3 + c]) / 255.0f;
    return out;
}

ImageU8 to_u8(const ImageF32& img) {
    if (img.channels != 3) throw ValueError("to_u8: expected 3 channels, got " + std::to_string(img.channels));
    ImageU8 out;
    out.width = img.width;
    out.height = img.height;
    out.channels = 3;
    out.pixels.resize(static_cast<std::size_t>(img.width) * img.height * 3);
    for (int y = 0; y < img.height; ++y)
        for (int x = 0; x < img.width; ++x)
            for (int c = 0; c < 3; ++c) {
                const double v = static_cast<double>(img.at(c, y, x)) * 255.0;
                const long q = std::lround(v);  // round half away from zero
                out.pixels[(static_cast<std::size_t>(y) * img.width + x) * 3 + c] =
                    static_cast<std::uint8_t>(std::clamp(q, 0L, 255L));
            }
    return out;
}

ImageF32 bicubic_resize(const ImageF32& img, int out_h, int out_w) {
    if (out_h < 1 || out_w < 1) throw ValueError("bicubic_resize: output dims must be >= 1");
    ImageF32 out;
    out.channels = img.channels;
    out.height = out_h;
    out.width = out_w;
    out.samples.resize(static_cast<std::size_t>(img.channels) * out_h * out_w);
    std::vector<float> plane(static_cast<std::size_t>(img.height) * img.width);
    for (int c = 0; c < img.channels; ++c) {
        const float* src = img.samples.data() + static_cast<std::size_t>(c) * img.height * img.width;
        std::copy(src, src + plane.size(), plane.begin());
        auto resized = detail::cubic_resample_plane(plane, img.height, img.width, out_h, out_w);
        std::copy(resized.begin(), resized.end(),
                  out.samples.begin() + static_cast<std::size_t>(c) * out_h * out_w);
    }
    return out;
}

double psnr(const ImageF32& a, const ImageF32& b, double peak) {
    if (a.channels != b.channels || a.height != b.height || a.width != b.width) {
        throw ShapeError("psnr: image shapes disagree");
    }
    double mse = 0.0;
    const std::size_t n = a.samples.size();
    for (std::size_t i = 0; i < n; ++i) {
        const double d = static_cast<double>(a.samples[i]) - static_cast<double>(b.samples[i]);
        mse += d * d;
    }
    mse /= static_cast<double>(n);
    if (mse == 0.0) return kPsnrInf;
    return 10.0 * std::log10(peak * peak / mse);
}

double ssim(const ImageF32& a, const ImageF32& b) {
    if (a.channels != b.channels || a.height != b.height || a.width != b.width) {
        throw ShapeError("ssim: image shapes disagree");
    }
    constexpr int kWin = 11;
    if (a.height < kWin || a.width < kWin) {
        throw ValueError("ssim: image smaller than the 11x11 window");
    }
    constexpr double kSigma = 1.5;
    constexpr double c1 = 0.01 * 0.01;  // (K1*L)^2 with L = 1
    constexpr double c2 = 0.03 * 0.03;

    static const auto window = [] {
        std::array<double, kWin * kWin> w{};
        double sum = 0.0;
        for (int i = 0; i < kWin; ++i)
            for (int j = 0; j < kWin; ++j) {
                const double dy = i - kWin / 2, dx = j - kWin / 2;
                w[i * kWin + j] = std::exp(-(dy * dy + dx * dx) / (2.0 * kSigma * kSigma));
                sum += w[i * kWin + j];
            }
        for (auto& v : w) v /= sum;
        return w;
    }();

    double total = 0.0;
    std::size_t count = 0;
    for (int c = 0; c < a.channels; ++c) {
        for (int y = 0; y + kWin <= a.height; ++y) {
            for (int x = 0; x + kWin <= a.width; ++x) {
                double mu_a = 0, mu_b = 0, aa = 0, bb = 0, ab = 0;
                for (int i = 0; i < kWin; ++i)
                    for (int j = 0; j < kWin; ++j) {
                        const double w = window[i * kWin + j];
                        const double va = a.at(c, y + i, x + j);
                        const double vb = b.at(c, y + i, x + j);
                        mu_a += w * va;
                        mu_b += w * vb;
                        aa += w * va * va;
                        bb += w * vb * vb;
                        ab += w * va * vb;
                    }
                const double var_a = aa - mu_a * mu_a;
                const double var_b = bb - mu_b * mu_b;
                const double cov = ab - mu_a * mu_b;
                const double s = ((2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2)) /
                                 ((mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2));
                total += s;
                ++count;
            }
        }
    }
    return total / static_cast<double>(count);
}

ImageF32 crop(const ImageF32& img, int y, int x, int h, int w) {
    if (y < 0 || x < 0 || y + h > img.height || x + w > img.width) {
        throw ValueError("crop: window out of bounds");
    }
    ImageF32 out;
    out.channels = img.channels;
    out.height = h;
    out.width = w;
    out.samples.resize(static_cast<std::size_t>(img.channels) * h * w);
    for (int c = 0; c < img.channels; ++c)
        for (int yy = 0; yy < h; ++yy)
            for (int xx = 0; xx < w; ++xx) out.at(c, yy, xx) = img.at(c, y + yy, x + xx);
    return out;
}

ImageF32 center_crop_to_multiple(const ImageF32& img, int multiple) {
    const int h = img.height / multiple * multiple;
    const int w = img.width / multiple * multiple;
    if (h < 1 || w < 1) throw ValueError("center_crop_to_multiple: image smaller than " + std::to_string(multiple));
    const int oy = (img.height - h) / 2;
    const int ox = (img.width - w) / 2;
    return crop(img, oy, ox, h, w);
}

SamplePair degrade(const ImageF32& hr, int scale) {
    if (scale < 2 || scale > 4) throw ValueError("degrade: scale must be one of {2,3,4}");
    if (hr.height < scale || hr.width < scale) throw ValueError("degrade: image smaller than the scale factor");
    SamplePair pair;
    pair.hr = center_crop_to_multiple(hr, scale);
    pair.lr = bicubic_resize(pair.hr, pair.hr.height / scale, pair.hr.width / scale);
    return pair;
}

}  // namespace csasr
