#pragma once

// Dataset plumbing: image/mask loading and resizing, JSONL manifests,
// deterministic splits, and a synthetic lesion generator for desk-scale
// training runs. Directory convention: images/ and masks/ with matched
// file stems.

#include <array>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <random>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>
#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include "lssf/tensor.hpp"

namespace lssf {

struct ManifestEntry {
    std::string image;
    std::string mask;
};

struct DatasetManifest {
    std::string name;
    std::string split;  // train | val | test
    int image_size = 256;
    std::vector<ManifestEntry> entries;
};

template <typename T>
struct SampleBatch {
    Tensor<T> images;  // [N,S,S,3] in [0,1]
    Tensor<T> masks;   // [N,S,S,1] in {0,1}
};

// image: bilinear resize, scaled to [0,1], RGB channel order
// mask: nearest resize, binarized at 128 (>= 128 -> 1)
template <typename T = float>
std::pair<Tensor<T>, Tensor<T>> load_sample(const std::string& image_path, const std::string& mask_path,
                                            int target_size) {
    if (target_size < 1) throw std::invalid_argument("load_sample: bad target size");
    cv::Mat img = cv::imread(image_path, cv::IMREAD_COLOR);
    if (img.empty()) throw std::runtime_error("load_sample: cannot read image " + image_path);
    cv::Mat msk = cv::imread(mask_path, cv::IMREAD_GRAYSCALE);
    if (msk.empty()) throw std::runtime_error("load_sample: cannot read mask " + mask_path);

    cv::resize(img, img, cv::Size(target_size, target_size), 0, 0, cv::INTER_LINEAR);
    cv::resize(msk, msk, cv::Size(target_size, target_size), 0, 0, cv::INTER_NEAREST);
    cv::cvtColor(img, img, cv::COLOR_BGR2RGB);

    Tensor<T> image({target_size, target_size, 3});
    Tensor<T> mask({target_size, target_size, 1});
    for (int y = 0; y < target_size; ++y) {
        const auto* ip = img.ptr<uint8_t>(y);
        const auto* mp = msk.ptr<uint8_t>(y);
        for (int x = 0; x < target_size; ++x) {
            for (int c = 0; c < 3; ++c)
                image[(int64_t(y) * target_size + x) * 3 + c] = T(ip[x * 3 + c]) / T(255);
            mask[int64_t(y) * target_size + x] = mp[x] >= 128 ? T(1) : T(0);
        }
    }
    return {std::move(image), std::move(mask)};
}

// image only (no mask), plus its original dimensions before the resize
template <typename T = float>
Tensor<T> load_image(const std::string& image_path, int target_size, int* orig_w = nullptr,
                     int* orig_h = nullptr) {
    if (target_size < 1) throw std::invalid_argument("load_image: bad target size");
    cv::Mat img = cv::imread(image_path, cv::IMREAD_COLOR);
    if (img.empty()) throw std::runtime_error("load_image: cannot read image " + image_path);
    if (orig_w) *orig_w = img.cols;
    if (orig_h) *orig_h = img.rows;
    cv::resize(img, img, cv::Size(target_size, target_size), 0, 0, cv::INTER_LINEAR);
    cv::cvtColor(img, img, cv::COLOR_BGR2RGB);
    Tensor<T> image({target_size, target_size, 3});
    for (int y = 0; y < target_size; ++y) {
        const auto* ip = img.ptr<uint8_t>(y);
        for (int x = 0; x < target_size; ++x)
            for (int c = 0; c < 3; ++c)
                image[(int64_t(y) * target_size + x) * 3 + c] = T(ip[x * 3 + c]) / T(255);
    }
    return image;
}

template <typename T = float>
SampleBatch<T> load_batch(const std::vector<ManifestEntry>& entries, int target_size) {
    if (entries.empty()) throw std::invalid_argument("load_batch: empty entry list");
    int n = int(entries.size());
    SampleBatch<T> batch{Tensor<T>({n, target_size, target_size, 3}),
                         Tensor<T>({n, target_size, target_size, 1})};
    int64_t istride = int64_t(target_size) * target_size * 3;
    int64_t mstride = int64_t(target_size) * target_size;
    for (int i = 0; i < n; ++i) {
        auto [img, msk] = load_sample<T>(entries[i].image, entries[i].mask, target_size);
        std::copy(img.data.begin(), img.data.end(), batch.images.data.begin() + i * istride);
        std::copy(msk.data.begin(), msk.data.end(), batch.masks.data.begin() + i * mstride);
    }
    return batch;
}

// Seeded shuffle, then contiguous cuts at the cumulative fractions: splits
// are disjoint and exhaustive by construction.
inline std::array<std::vector<ManifestEntry>, 3> split_manifest(std::vector<ManifestEntry> entries,
                                                                std::array<double, 3> fractions,
                                                                uint64_t seed) {
    if (entries.empty()) throw std::invalid_argument("split_manifest: empty entry list");
    double sum = fractions[0] + fractions[1] + fractions[2];
    if (std::abs(sum - 1.0) > 1e-9) throw std::invalid_argument("split_manifest: fractions must sum to 1");
    std::mt19937_64 rng(seed);
    std::shuffle(entries.begin(), entries.end(), rng);
    int64_t n = int64_t(entries.size());
    int64_t c1 = int64_t(fractions[0] * double(n));
    int64_t c2 = int64_t((fractions[0] + fractions[1]) * double(n));
    std::array<std::vector<ManifestEntry>, 3> out;
    out[0].assign(entries.begin(), entries.begin() + c1);
    out[1].assign(entries.begin() + c1, entries.begin() + c2);
    out[2].assign(entries.begin() + c2, entries.end());
    return out;
}

// JSON lines, one {"image": ..., "mask": ...} per line.
inline void write_manifest(const std::string& path, const DatasetManifest& m) {
    std::ofstream f(path);
    if (!f) throw std::runtime_error("write_manifest: cannot open " + path);
    for (const auto& e : m.entries) {
        nlohmann::json row = {{"image", e.image}, {"mask", e.mask}};
        f << row.dump() << "\n";
    }
}

inline DatasetManifest read_manifest(const std::string& path, int image_size = 256) {
    std::ifstream f(path);
    if (!f) throw std::runtime_error("read_manifest: cannot open " + path);
    DatasetManifest m;
    m.image_size = image_size;
    std::string line;
    while (std::getline(f, line)) {
        if (line.empty()) continue;
        nlohmann::json row = nlohmann::json::parse(line);
        m.entries.push_back({row.at("image").get<std::string>(), row.at("mask").get<std::string>()});
    }
    return m;
}

// {0,1} mask tensor [S,S] or [S,S,1] written as 8-bit grayscale {0,255} PNG
inline void save_mask_png(const std::string& path, const Tensor<uint8_t>& mask) {
    if (mask.ndim() != 2 && !(mask.ndim() == 3 && mask.dim(2) == 1))
        throw std::invalid_argument("save_mask_png: expected [S,S] or [S,S,1]");
    int h = mask.dim(0), w = mask.dim(1);
    cv::Mat img(h, w, CV_8UC1);
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) img.at<uint8_t>(y, x) = mask[int64_t(y) * w + x] ? 255 : 0;
    if (!cv::imwrite(path, img)) throw std::runtime_error("save_mask_png: cannot write " + path);
}

// Noisy skin-toned background, 1-2 soft-edged dark ellipses (the lesion),
// random hair strokes; the mask is the exact ellipse interior. Lesion area
// is resampled until it covers 2-60% of the frame.
inline DatasetManifest synth_lesions(int n, int size, uint64_t seed, const std::string& out_dir) {
    if (n < 1) throw std::invalid_argument("synth_lesions: n must be >= 1");
    if (size < 1 || (size & (size - 1)) != 0)
        throw std::invalid_argument("synth_lesions: size must be a power of two");
    namespace fs = std::filesystem;
    fs::create_directories(fs::path(out_dir) / "images");
    fs::create_directories(fs::path(out_dir) / "masks");

    std::mt19937_64 rng(seed);
    auto uni = [&rng](double lo, double hi) {
        return std::uniform_real_distribution<double>(lo, hi)(rng);
    };

    DatasetManifest m;
    m.name = "synth";
    m.split = "train";
    m.image_size = size;
    for (int i = 0; i < n; ++i) {
        cv::Mat mask;
        // resample until the lesion covers a plausible fraction of the frame
        for (;;) {
            mask = cv::Mat::zeros(size, size, CV_8UC1);
            int blobs = 1 + int(rng() % 2);
            for (int b = 0; b < blobs; ++b) {
                cv::Point center(int(uni(size * 0.25, size * 0.75)), int(uni(size * 0.25, size * 0.75)));
                cv::Size axes(int(uni(size * 0.08, size * 0.3)), int(uni(size * 0.08, size * 0.3)));
                cv::ellipse(mask, center, axes, uni(0, 180), 0, 360, cv::Scalar(255), cv::FILLED);
            }
            double frac = double(cv::countNonZero(mask)) / double(size) / double(size);
            if (frac >= 0.02 && frac <= 0.6) break;
        }

        cv::Mat img(size, size, CV_8UC3);
        for (int y = 0; y < size; ++y) {
            auto* row = img.ptr<uint8_t>(y);
            for (int x = 0; x < size; ++x) {
                row[x * 3 + 0] = uint8_t(150 + uni(-20, 20));  // B
                row[x * 3 + 1] = uint8_t(170 + uni(-20, 20));  // G
                row[x * 3 + 2] = uint8_t(205 + uni(-20, 20));  // R
            }
        }
        // lesion layer: darker tone with a blurred boundary
        cv::Mat soft;
        mask.convertTo(soft, CV_32F, 1.0 / 255.0);
        cv::GaussianBlur(soft, soft, cv::Size(0, 0), size * 0.01 + 1.0);
        cv::Scalar lesion(uni(40, 80), uni(50, 90), uni(80, 130));
        for (int y = 0; y < size; ++y) {
            auto* row = img.ptr<uint8_t>(y);
            const float* a = soft.ptr<float>(y);
            for (int x = 0; x < size; ++x)
                for (int c = 0; c < 3; ++c)
                    row[x * 3 + c] = uint8_t(row[x * 3 + c] * (1.0f - a[x]) + lesion[c] * a[x]);
        }
        int hairs = int(rng() % 6);
        for (int h = 0; h < hairs; ++h) {
            cv::Point p1(int(uni(0, size)), int(uni(0, size)));
            cv::Point p2(int(uni(0, size)), int(uni(0, size)));
            cv::line(img, p1, p2, cv::Scalar(uni(20, 60), uni(20, 60), uni(20, 60)), 1, cv::LINE_AA);
        }

        char stem[32];
        std::snprintf(stem, sizeof stem, "%04d.png", i);
        std::string ipath = (fs::path(out_dir) / "images" / stem).string();
        std::string mpath = (fs::path(out_dir) / "masks" / stem).string();
        if (!cv::imwrite(ipath, img) || !cv::imwrite(mpath, mask))
            throw std::runtime_error("synth_lesions: cannot write " + ipath);
        m.entries.push_back({ipath, mpath});
    }
    write_manifest((fs::path(out_dir) / "manifest.jsonl").string(), m);
    return m;
}

}  // namespace lssf
