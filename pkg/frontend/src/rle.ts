// Run-length decoding for the mask wire format: flat [start, length, ...]
// pairs over the row-major flattened slice.

export function decodeRle(runs: number[], height: number, width: number): Uint8Array {
  if (runs.length % 2 !== 0) {
    throw new Error(`malformed RLE: odd run list length ${runs.length}`);
  }
  const size = height * width;
  const mask = new Uint8Array(size);
  for (let i = 0; i < runs.length; i += 2) {
    const start = runs[i];
    const length = runs[i + 1];
    if (start < 0 || length <= 0 || start + length > size) {
      throw new Error(`malformed RLE run [${start}, ${length}] for ${height}x${width}`);
    }
    mask.fill(1, start, start + length);
  }
  return mask;
}

export function maskArea(mask: Uint8Array): number {
  let area = 0;
  for (let i = 0; i < mask.length; i++) area += mask[i];
  return area;
}
