// Pure overlay composition: per-class masks -> RGBA pixel buffer.
// Keeping this free of canvas calls makes it testable without a DOM.

export interface ClassColor {
  r: number;
  g: number;
  b: number;
}

// One distinct color per foreground class id (1-based), cycled if exceeded.
export const CLASS_PALETTE: ClassColor[] = [
  { r: 251, g: 146, b: 60 }, // orange
  { r: 59, g: 130, b: 246 }, // blue
  { r: 34, g: 197, b: 94 }, // green
  { r: 168, g: 85, b: 247 }, // purple
  { r: 236, g: 72, b: 153 }, // pink
  { r: 6, g: 182, b: 212 }, // cyan
];

export function classColor(classId: number): ClassColor {
  return CLASS_PALETTE[(classId - 1) % CLASS_PALETTE.length];
}

/**
 * Blend visible class masks into one RGBA buffer. Later classes paint over
 * earlier ones where masks overlap; uncovered pixels stay fully transparent.
 */
export function composeOverlay(
  masks: Map<number, Uint8Array>,
  height: number,
  width: number,
  opacity: number,
  visible: (classId: number) => boolean = () => true,
): Uint8ClampedArray {
  const out = new Uint8ClampedArray(height * width * 4);
  const alpha = Math.round(Math.max(0, Math.min(1, opacity)) * 255);
  const classIds = [...masks.keys()].sort((a, b) => a - b);
  for (const classId of classIds) {
    if (!visible(classId)) continue;
    const mask = masks.get(classId)!;
    if (mask.length !== height * width) {
      throw new Error(`mask size ${mask.length} does not match ${height}x${width}`);
    }
    const color = classColor(classId);
    for (let i = 0; i < mask.length; i++) {
      if (!mask[i]) continue;
      const o = i * 4;
      out[o] = color.r;
      out[o + 1] = color.g;
      out[o + 2] = color.b;
      out[o + 3] = alpha;
    }
  }
  return out;
}

/** Map a canvas-space click to voxel (row, col) given the rendered scale. */
export function canvasToVoxel(
  canvasX: number,
  canvasY: number,
  canvasWidth: number,
  canvasHeight: number,
  sliceWidth: number,
  sliceHeight: number,
): { row: number; col: number } {
  const col = Math.floor((canvasX / canvasWidth) * sliceWidth);
  const row = Math.floor((canvasY / canvasHeight) * sliceHeight);
  return {
    row: Math.max(0, Math.min(sliceHeight - 1, row)),
    col: Math.max(0, Math.min(sliceWidth - 1, col)),
  };
}
