#ifndef CHANPRUNE_DATA_HPP_
#define CHANPRUNE_DATA_HPP_

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <iterator>
#include <numeric>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "errors.hpp"
#include "random.hpp"
#include "tensor.hpp"

namespace chanprune {

enum class Split { Train, Test };

/**
 * Images in [0, 1] as an M×C×H×W float tensor plus optional labels. An
 * unlabeled dataset has an empty label vector.
 */
struct Dataset {
	Tensor<float> images;
	std::vector<int> labels;
	std::size_t num_classes = 0;
	Split split = Split::Train;
	std::uint64_t seed = 0;

	std::size_t size() const { return images.empty() ? 0 : images.dim(0); }
	bool has_labels() const { return !labels.empty(); }
	Shape example_shape() const { return {images.dim(1), images.dim(2), images.dim(3)}; }

	template <Scalar T>
	Tensor<T> gather(std::span<const std::size_t> idx) const {
		const std::size_t stride = row_stride(images);
		Shape s = images.shape();
		s[0] = idx.size();
		std::vector<T> out;
		out.reserve(idx.size() * stride);
		for (auto i : idx) {
			const auto row = images.data().subspan(i * stride, stride);
			std::transform(row.begin(), row.end(), std::back_inserter(out), [](float v) { return static_cast<T>(v); });
		}
		return Tensor<T>(std::move(s), std::move(out));
	}

	std::vector<int> gather_labels(std::span<const std::size_t> idx) const {
		if (!has_labels()) throw InputError("dataset has no labels");
		std::vector<int> out;
		out.reserve(idx.size());
		for (auto i : idx) out.push_back(labels[i]);
		return out;
	}

	/// First `count` examples, in order.
	Dataset prefix(std::size_t count) const {
		if (count == 0 || count > size())
			throw InputError("prefix size " + std::to_string(count) + " outside [1, " + std::to_string(size()) + "]");
		Dataset d = *this;
		d.images = images.slice_rows(0, count);
		if (has_labels()) d.labels.resize(count);
		return d;
	}

	Dataset without_labels() const {
		Dataset d = *this;
		d.labels.clear();
		return d;
	}
};

/// Index lists of consecutive batches; the last one may be short.
inline std::vector<std::vector<std::size_t>> batches(std::size_t count, std::size_t batch_size,
		std::optional<std::uint64_t> shuffle_seed = std::nullopt) {
	if (batch_size == 0) throw InputError("batch size must be at least 1");
	std::vector<std::size_t> order(count);
	std::iota(order.begin(), order.end(), std::size_t{0});
	if (shuffle_seed) {
		std::mt19937_64 rng(stream_key(*shuffle_seed, 0x5eed));
		std::shuffle(order.begin(), order.end(), rng);
	}
	std::vector<std::vector<std::size_t>> out;
	for (std::size_t b = 0; b < count; b += batch_size)
		out.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(b),
				order.begin() + static_cast<std::ptrdiff_t>(std::min(count, b + batch_size)));
	return out;
}

inline std::vector<std::vector<std::size_t>> batches(const Dataset& d, std::size_t batch_size,
		std::optional<std::uint64_t> shuffle_seed = std::nullopt) {
	return batches(d.size(), batch_size, shuffle_seed);
}

// ---------------------------------------------------------------------------
// Synthetic glyphs
// ---------------------------------------------------------------------------

struct ShapesConfig {
	std::size_t num_classes = 4;
	std::size_t per_class = 100;
	std::size_t image_size = 16;
	double noise = 0.1;
	std::uint64_t seed = 1;
	Split split = Split::Train;
};

inline const std::array<const char*, 10>& glyph_names() {
	static const std::array<const char*, 10> names{
			"bar", "checker", "cross", "ring", "corner", "diagonal", "box", "disk", "vbar", "x"};
	return names;
}

namespace detail {

class Canvas {
public:
	explicit Canvas(std::size_t n) : n_(n), px_(n * n, 0.0f) {}
	void set(long r, long c) {
		if (r >= 0 && c >= 0 && r < static_cast<long>(n_) && c < static_cast<long>(n_))
			px_[static_cast<std::size_t>(r) * n_ + static_cast<std::size_t>(c)] = 1.0f;
	}
	void rect(long r0, long c0, long h, long w) {
		for (long r = r0; r < r0 + h; ++r)
			for (long c = c0; c < c0 + w; ++c) set(r, c);
	}
	std::vector<float>& pixels() { return px_; }

private:
	std::size_t n_;
	std::vector<float> px_;
};

// Draws glyph `cls` with side length `s` and top-left corner (r0, c0).
inline void draw_glyph(Canvas& cv, std::size_t cls, long r0, long c0, long s) {
	const long mid = s / 2;
	switch (cls) {
	case 0:  // thin horizontal bar
		cv.rect(r0 + mid, c0, 1, s);
		break;
	case 1:  // checkerboard with 2-pixel cells
		for (long r = 0; r < s; ++r)
			for (long c = 0; c < s; ++c)
				if (((r / 2) + (c / 2)) % 2 == 0) cv.set(r0 + r, c0 + c);
		break;
	case 2:  // plus
		cv.rect(r0 + mid, c0, 1, s);
		cv.rect(r0, c0 + mid, s, 1);
		break;
	case 3: {  // ring
		const double rad = (s - 1) / 2.0, cr = r0 + rad, cc = c0 + rad;
		for (long r = r0; r < r0 + s; ++r)
			for (long c = c0; c < c0 + s; ++c) {
				const double d = std::hypot(r - cr, c - cc);
				if (std::abs(d - rad + 0.5) < 0.7) cv.set(r, c);
			}
		break;
	}
	case 4:  // L corner
		cv.rect(r0, c0, s, 1);
		cv.rect(r0 + s - 1, c0, 1, s);
		break;
	case 5:  // main diagonal
		for (long k = 0; k < s; ++k) cv.set(r0 + k, c0 + k);
		break;
	case 6:  // box outline
		cv.rect(r0, c0, 1, s);
		cv.rect(r0 + s - 1, c0, 1, s);
		cv.rect(r0, c0, s, 1);
		cv.rect(r0, c0 + s - 1, s, 1);
		break;
	case 7: {  // filled disk
		const double rad = (s - 1) / 2.0, cr = r0 + rad, cc = c0 + rad;
		for (long r = r0; r < r0 + s; ++r)
			for (long c = c0; c < c0 + s; ++c)
				if (std::hypot(r - cr, c - cc) <= rad) cv.set(r, c);
		break;
	}
	case 8:  // vertical bar
		cv.rect(r0, c0 + mid, s, 1);
		break;
	case 9:  // X
		for (long k = 0; k < s; ++k) {
			cv.set(r0 + k, c0 + k);
			cv.set(r0 + k, c0 + s - 1 - k);
		}
		break;
	}
}

}  // namespace detail

/**
 * Renders `per_class` examples of each of the first K glyph classes at random
 * positions and scales (side 45–75% of the image) with additive Gaussian noise,
 * clamped to [0, 1]. Examples are emitted in a seeded shuffled order, so any
 * prefix mixes all classes. Example i is drawn from a stream keyed by
 * (seed, split, i).
 */
inline Dataset generate_shapes(const ShapesConfig& cfg) {
	if (cfg.num_classes < 2 || cfg.num_classes > 10)
		throw InputError("num_classes must be in [2, 10], got " + std::to_string(cfg.num_classes));
	if (cfg.image_size < 12) throw InputError("image size must be at least 12, got " + std::to_string(cfg.image_size));
	if (cfg.per_class == 0) throw InputError("per_class must be positive");
	const std::size_t n = cfg.image_size, total = cfg.num_classes * cfg.per_class;
	const std::uint64_t split_tag = cfg.split == Split::Train ? 0 : 1;

	std::vector<int> labels(total);
	for (std::size_t i = 0; i < total; ++i) labels[i] = static_cast<int>(i % cfg.num_classes);
	{
		std::mt19937_64 rng(stream_key(cfg.seed, split_tag, 0xD47A));
		std::shuffle(labels.begin(), labels.end(), rng);
	}

	std::vector<float> pixels;
	pixels.reserve(total * n * n);
	const long lo = static_cast<long>(std::ceil(0.45 * static_cast<double>(n)));
	const long hi = static_cast<long>(std::floor(0.75 * static_cast<double>(n)));
	for (std::size_t i = 0; i < total; ++i) {
		auto rng = keyed_engine(cfg.seed, split_tag + 2, i);
		std::uniform_int_distribution<long> side(lo, hi);
		const long s = side(rng);
		std::uniform_int_distribution<long> pos(0, static_cast<long>(n) - s);
		const long r0 = pos(rng), c0 = pos(rng);
		detail::Canvas cv(n);
		detail::draw_glyph(cv, static_cast<std::size_t>(labels[i]), r0, c0, s);
		if (cfg.noise > 0) {
			std::normal_distribution<double> nd(0.0, cfg.noise);
			for (auto& p : cv.pixels()) p = static_cast<float>(std::clamp(p + nd(rng), 0.0, 1.0));
		}
		pixels.insert(pixels.end(), cv.pixels().begin(), cv.pixels().end());
	}
	Dataset d;
	d.images = Tensor<float>({total, 1, n, n}, std::move(pixels));
	d.labels = std::move(labels);
	d.num_classes = cfg.num_classes;
	d.split = cfg.split;
	d.seed = cfg.seed;
	return d;
}

struct DataSplits {
	Dataset train;
	Dataset test;
};

inline DataSplits generate_shape_splits(ShapesConfig cfg, std::size_t per_class_train, std::size_t per_class_test) {
	cfg.split = Split::Train;
	cfg.per_class = per_class_train;
	Dataset train = generate_shapes(cfg);
	cfg.split = Split::Test;
	cfg.per_class = per_class_test;
	return {std::move(train), generate_shapes(cfg)};
}

// ---------------------------------------------------------------------------
// IDX files
// ---------------------------------------------------------------------------

namespace detail {

inline std::vector<unsigned char> read_file(const std::string& path) {
	std::ifstream in(path, std::ios::binary);
	if (!in) throw InputError("cannot open '" + path + "'");
	return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline std::uint32_t read_be32(const std::vector<unsigned char>& b, std::size_t off, const std::string& path) {
	if (off + 4 > b.size()) throw FormatError("'" + path + "' truncated in header", b.size());
	return (std::uint32_t{b[off]} << 24) | (std::uint32_t{b[off + 1]} << 16) | (std::uint32_t{b[off + 2]} << 8) |
			std::uint32_t{b[off + 3]};
}

inline void write_be32(std::ostream& os, std::uint32_t v) {
	const char bytes[4] = {static_cast<char>(v >> 24), static_cast<char>(v >> 16), static_cast<char>(v >> 8),
			static_cast<char>(v)};
	os.write(bytes, 4);
}

}  // namespace detail

inline constexpr std::uint32_t kIdxImagesMagic = 0x00000803;
inline constexpr std::uint32_t kIdxLabelsMagic = 0x00000801;

/**
 * Loads an IDX image file (magic 0x803, dims count×rows×cols, unsigned bytes)
 * and, optionally, the matching label file (magic 0x801). Pixels are scaled
 * to [0, 1]. `num_classes` = 0 infers it as max label + 1.
 */
inline Dataset load_idx(const std::string& images_path, const std::optional<std::string>& labels_path = std::nullopt,
		std::size_t num_classes = 0) {
	const auto img = detail::read_file(images_path);
	const std::uint32_t magic = detail::read_be32(img, 0, images_path);
	if (magic != kIdxImagesMagic)
		throw FormatError("'" + images_path + "' has bad image magic " + std::to_string(magic), 0);
	const std::uint32_t count = detail::read_be32(img, 4, images_path);
	const std::uint32_t rows = detail::read_be32(img, 8, images_path);
	const std::uint32_t cols = detail::read_be32(img, 12, images_path);
	if (count == 0) throw FormatError("'" + images_path + "' holds zero images", 4);
	if (rows == 0 || cols == 0) throw FormatError("'" + images_path + "' has an empty image extent", 8);
	const std::size_t need = 16 + std::size_t{count} * rows * cols;
	if (img.size() < need)
		throw FormatError("'" + images_path + "' truncated: expected " + std::to_string(need) + " bytes, found " +
				std::to_string(img.size()), img.size());
	std::vector<float> px(std::size_t{count} * rows * cols);
	for (std::size_t i = 0; i < px.size(); ++i) px[i] = static_cast<float>(img[16 + i]) / 255.0f;

	Dataset d;
	d.images = Tensor<float>({count, 1, rows, cols}, std::move(px));
	d.num_classes = num_classes;
	if (labels_path) {
		const auto lab = detail::read_file(*labels_path);
		if (detail::read_be32(lab, 0, *labels_path) != kIdxLabelsMagic)
			throw FormatError("'" + *labels_path + "' has bad label magic", 0);
		const std::uint32_t lcount = detail::read_be32(lab, 4, *labels_path);
		if (lcount != count)
			throw FormatError("'" + *labels_path + "' holds " + std::to_string(lcount) + " labels for " +
					std::to_string(count) + " images", 4);
		if (lab.size() < 8 + std::size_t{count})
			throw FormatError("'" + *labels_path + "' truncated", lab.size());
		d.labels.resize(count);
		int max_label = 0;
		for (std::size_t i = 0; i < count; ++i) {
			d.labels[i] = lab[8 + i];
			max_label = std::max(max_label, d.labels[i]);
		}
		if (num_classes == 0) d.num_classes = static_cast<std::size_t>(max_label) + 1;
		if (static_cast<std::size_t>(max_label) >= d.num_classes)
			throw FormatError("'" + *labels_path + "' has label " + std::to_string(max_label) + " outside " +
					std::to_string(d.num_classes) + " classes", 8);
	}
	return d;
}

/// Writes single-channel images (rounded to bytes) and, if present, labels.
inline void write_idx(const Dataset& d, const std::string& images_path,
		const std::optional<std::string>& labels_path = std::nullopt) {
	if (d.images.dim(1) != 1) throw InputError("IDX export supports single-channel images only");
	{
		std::ofstream os(images_path, std::ios::binary);
		if (!os) throw InputError("cannot write '" + images_path + "'");
		detail::write_be32(os, kIdxImagesMagic);
		detail::write_be32(os, static_cast<std::uint32_t>(d.size()));
		detail::write_be32(os, static_cast<std::uint32_t>(d.images.dim(2)));
		detail::write_be32(os, static_cast<std::uint32_t>(d.images.dim(3)));
		for (float v : d.images.data())
			os.put(static_cast<char>(static_cast<unsigned char>(std::lround(std::clamp(v, 0.0f, 1.0f) * 255.0f))));
	}
	if (labels_path) {
		if (!d.has_labels()) throw InputError("dataset has no labels to export");
		std::ofstream os(*labels_path, std::ios::binary);
		if (!os) throw InputError("cannot write '" + *labels_path + "'");
		detail::write_be32(os, kIdxLabelsMagic);
		detail::write_be32(os, static_cast<std::uint32_t>(d.size()));
		for (int l : d.labels) os.put(static_cast<char>(static_cast<unsigned char>(l)));
	}
}

}  // namespace chanprune

#endif  // CHANPRUNE_DATA_HPP_
