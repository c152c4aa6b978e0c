import type { Schema } from './types.js';

// Digit keys map straight onto class ids ('5' labels class 5), taken from
// schema order. The full labeling loop must stay keyboard-only, so every
// class needs a key; ids above 9 would not fit a digit row.
export function buildKeymap(schema: Schema): Map<string, number> {
  const map = new Map<string, number>();
  for (const cls of schema.classes) {
    if (cls.id > 9) {
      throw new Error(`class id ${cls.id} has no digit key; schema too large for the keymap`);
    }
    map.set(String(cls.id), cls.id);
  }
  return map;
}

export function keyHint(classId: number): string {
  return String(classId);
}
