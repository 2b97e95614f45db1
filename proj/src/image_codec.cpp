#include "tractscope/image_codec.hpp"

#include <csetjmp>
#include <cstring>
#include <stdexcept>

#include <jpeglib.h>
#include <png.h>

#include "tractscope/errors.hpp"

namespace tractscope::acq {

namespace {

RasterImage decode_png(std::span<const uint8_t> bytes) {
    png_image png;
    std::memset(&png, 0, sizeof(png));
    png.version = PNG_IMAGE_VERSION;
    if (!png_image_begin_read_from_memory(&png, bytes.data(), bytes.size()))
        throw InputError(std::string("PNG decode failed: ") + png.message);
    png.format = PNG_FORMAT_RGB;
    RasterImage out;
    out.width = static_cast<int>(png.width);
    out.height = static_cast<int>(png.height);
    out.data.resize(PNG_IMAGE_SIZE(png));
    if (!png_image_finish_read(&png, nullptr, out.data.data(), 0, nullptr)) {
        std::string msg = png.message;
        png_image_free(&png);
        throw InputError("PNG decode failed: " + msg);
    }
    return out;
}

struct JpegErrorTrap {
    jpeg_error_mgr mgr;
    jmp_buf jump;
    char message[JMSG_LENGTH_MAX];
};

void jpeg_error_exit(j_common_ptr cinfo) {
    auto* trap = reinterpret_cast<JpegErrorTrap*>(cinfo->err);
    (*cinfo->err->format_message)(cinfo, trap->message);
    longjmp(trap->jump, 1);
}

RasterImage decode_jpeg(std::span<const uint8_t> bytes) {
    jpeg_decompress_struct cinfo;
    JpegErrorTrap trap;
    cinfo.err = jpeg_std_error(&trap.mgr);
    trap.mgr.error_exit = jpeg_error_exit;
    if (setjmp(trap.jump)) {
        jpeg_destroy_decompress(&cinfo);
        throw InputError(std::string("JPEG decode failed: ") + trap.message);
    }
    jpeg_create_decompress(&cinfo);
    jpeg_mem_src(&cinfo, bytes.data(), bytes.size());
    jpeg_read_header(&cinfo, TRUE);
    cinfo.out_color_space = JCS_RGB;  // grayscale auto-expands to 3 channels
    jpeg_start_decompress(&cinfo);

    RasterImage out;
    out.width = static_cast<int>(cinfo.output_width);
    out.height = static_cast<int>(cinfo.output_height);
    out.data.resize(static_cast<size_t>(out.width) * out.height * 3);
    while (cinfo.output_scanline < cinfo.output_height) {
        uint8_t* row = out.data.data() + static_cast<size_t>(cinfo.output_scanline) * out.width * 3;
        jpeg_read_scanlines(&cinfo, &row, 1);
    }
    jpeg_finish_decompress(&cinfo);
    jpeg_destroy_decompress(&cinfo);
    return out;
}

}  // namespace

RasterImage decode_image(std::span<const uint8_t> bytes) {
    static const uint8_t png_magic[4] = {0x89, 'P', 'N', 'G'};
    if (bytes.size() >= 4 && std::memcmp(bytes.data(), png_magic, 4) == 0) return decode_png(bytes);
    if (bytes.size() >= 2 && bytes[0] == 0xFF && bytes[1] == 0xD8) return decode_jpeg(bytes);
    throw InputError("unsupported image payload (expected PNG or JPEG)");
}

std::vector<uint8_t> encode_png(const RasterImage& image) {
    if (image.width <= 0 || image.height <= 0 ||
        image.data.size() != static_cast<size_t>(image.width) * image.height * 3)
        throw std::runtime_error("encode_png: inconsistent image");
    png_image png;
    std::memset(&png, 0, sizeof(png));
    png.version = PNG_IMAGE_VERSION;
    png.width = static_cast<png_uint_32>(image.width);
    png.height = static_cast<png_uint_32>(image.height);
    png.format = PNG_FORMAT_RGB;

    png_alloc_size_t size = 0;
    if (!png_image_write_to_memory(&png, nullptr, &size, 0, image.data.data(), 0, nullptr))
        throw std::runtime_error(std::string("PNG encode failed: ") + png.message);
    std::vector<uint8_t> out(size);
    if (!png_image_write_to_memory(&png, out.data(), &size, 0, image.data.data(), 0, nullptr))
        throw std::runtime_error(std::string("PNG encode failed: ") + png.message);
    out.resize(size);
    return out;
}

}  // namespace tractscope::acq
