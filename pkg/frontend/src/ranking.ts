// Click-to-rank state machine. Slots are clicked from worst to best; the
// n-th click gets rank n. By construction a payload can only be produced
// once every slot holds a distinct rank, so an invalid ranking (duplicate,
// missing, or foreign slot) is unrepresentable on the wire.

export class RankingState {
  private order: string[] = [];

  constructor(private readonly slots: string[]) {
    const unique = new Set(slots);
    if (unique.size !== slots.length) {
      throw new Error("duplicate slot ids");
    }
  }

  /** Assign the next rank to a slot, or clear the slot when ranked. */
  toggle(slotId: string): void {
    if (!this.slots.includes(slotId)) {
      throw new Error(`unknown slot ${slotId}`);
    }
    const at = this.order.indexOf(slotId);
    if (at >= 0) {
      this.order.splice(at, 1); // later clicks renumber automatically
    } else {
      this.order.push(slotId);
    }
  }

  rankOf(slotId: string): number | null {
    const at = this.order.indexOf(slotId);
    return at >= 0 ? at + 1 : null;
  }

  reset(): void {
    this.order = [];
  }

  get assignedCount(): number {
    return this.order.length;
  }

  isComplete(): boolean {
    return this.order.length === this.slots.length;
  }

  /** Complete permutation of 1..k, or null while the ranking is partial. */
  payload(): Record<string, number> | null {
    if (!this.isComplete()) {
      return null;
    }
    const ranking: Record<string, number> = {};
    this.order.forEach((slotId, index) => {
      ranking[slotId] = index + 1;
    });
    return ranking;
  }
}

/** Server-side mirror of the permutation rule, reused by tests. */
export function isValidRanking(ranking: Record<string, number>, slots: string[]): boolean {
  const keys = Object.keys(ranking);
  if (keys.length !== slots.length) return false;
  if (!slots.every((slot) => slot in ranking)) return false;
  const ranks = keys.map((k) => ranking[k]).sort((a, b) => (a ?? 0) - (b ?? 0));
  return ranks.every((rank, index) => rank === index + 1);
}
