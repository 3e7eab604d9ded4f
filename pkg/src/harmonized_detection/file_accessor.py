# Copyright (c) 2024 The harmonized-detection developers
#
# This software is made available under the MIT licence, see LICENCE.txt.

"""Access to input and output files on the local filesystem.

Every file produced by the command-line tools goes through a
:class:`FileAccessor` rooted at the output directory, so that I/O errors
surface uniformly as :exc:`DataAccessError`. Files may be stored gzipped;
reading transparently falls back to ``<name>.gz``.
"""

import gzip
import os
import pathlib

__all__ = [
    "DataAccessError",
    "FileAccessor",
    "read_file",
    "add_argparse_options",
    "get_accessor_for_dir",
]


NO_COMPRESS_MIME_TYPES = {
    "application/json",
    "application/x-ndjson",
    "text/plain",
}


class DataAccessError(Exception):
    """Raised when a file cannot be read or written."""
    pass


class FileAccessor:
    """Read and write files under a base directory.

    :param str base_dir: path to the directory containing the files
    :param bool gzip: compress binary files losslessly with gzip (text
        formats are always stored uncompressed)
    :param int compresslevel: gzip compression level
    """

    def __init__(self, base_dir, gzip=False, compresslevel=9):
        self.base_path = pathlib.Path(base_dir)
        self.gzip = gzip
        self.compresslevel = compresslevel

    def _file_path(self, relative_path):
        file_path = self.base_path / pathlib.Path(relative_path)
        if ".." in file_path.relative_to(self.base_path).parts:
            raise ValueError("only relative paths pointing under base_path "
                             "are accepted")
        return file_path

    def file_exists(self, relative_path):
        file_path = self._file_path(relative_path)
        try:
            return (file_path.is_file()
                    or file_path.with_name(file_path.name + ".gz").is_file())
        except OSError as exc:
            raise DataAccessError(
                f"Error accessing {file_path}: {exc}") from exc

    def fetch_file(self, relative_path):
        """Read the contents of a file.

        :param str relative_path: path of the file under the base directory
        :rtype: bytes
        :raises DataAccessError: if the file is missing or unreadable
        """
        file_path = self._file_path(relative_path)
        try:
            if file_path.is_file():
                f = file_path.open("rb")
            elif file_path.with_name(file_path.name + ".gz").is_file():
                f = gzip.open(str(file_path.with_name(file_path.name + ".gz")),
                              "rb")
            else:
                raise DataAccessError(f"Cannot find {relative_path} in "
                                      f"{self.base_path}")
            with f:
                return f.read()
        except OSError as exc:
            raise DataAccessError(
                f"Error fetching {file_path}: {exc}") from exc

    def store_file(self, relative_path, buf,
                   mime_type="application/octet-stream",
                   overwrite=False):
        """Write a file, creating parent directories as needed.

        :param str relative_path: path of the file under the base directory
        :param bytes buf: the contents
        :param str mime_type: type of the contents, text types are never
            compressed
        :param bool overwrite: replace an existing file
        :raises DataAccessError: if the file cannot be written (or exists
            and ``overwrite`` is false)
        """
        file_path = self._file_path(relative_path)
        mode = "wb" if overwrite else "xb"
        try:
            os.makedirs(str(file_path.parent), exist_ok=True)
            if self.gzip and mime_type not in NO_COMPRESS_MIME_TYPES:
                with gzip.open(
                        str(file_path.with_name(file_path.name + ".gz")),
                        mode, compresslevel=self.compresslevel) as f:
                    f.write(buf)
            else:
                with file_path.open(mode) as f:
                    f.write(buf)
        except OSError as exc:
            raise DataAccessError(f"Error storing {file_path}: {exc}"
                                  ) from exc


def read_file(path):
    """Read a file given by its path (``<path>.gz`` is tried as well).

    :rtype: bytes
    :raises DataAccessError: if the file is missing or unreadable
    """
    path = pathlib.Path(path)
    return FileAccessor(path.parent).fetch_file(path.name)


def add_argparse_options(parser):
    """Add command-line options for file storage.

    The options are read back by :func:`get_accessor_for_dir`::

        parser = argparse.ArgumentParser()
        add_argparse_options(parser)
        args = parser.parse_args()
        accessor = get_accessor_for_dir(out_dir, vars(args))

    :param argparse.ArgumentParser parser: an argument parser
    """
    group = parser.add_argument_group("Options for file storage")
    group.add_argument("--gzip", action="store_true",
                       help="gzip the binary output files (JSON outputs are "
                       "always stored uncompressed)")
    group.add_argument("--compresslevel", type=int, default=9,
                       choices=range(0, 10),
                       help="gzip compression level (0-9, default 9)")
    group.add_argument("--overwrite", action="store_true",
                       help="replace existing output files")


def get_accessor_for_dir(base_dir, options={}):
    """Create a :class:`FileAccessor` from command-line options.

    :param str base_dir: the directory
    :param dict options: options from :func:`add_argparse_options`
    :rtype: FileAccessor
    """
    return FileAccessor(base_dir, gzip=options.get("gzip", False),
                        compresslevel=options.get("compresslevel", 9))
