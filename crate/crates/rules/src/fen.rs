//! FEN import and export with the standard six-field order.

use crate::error::ParseError;
use crate::position::{CastlingRights, Position};
use crate::{Color, Piece, Square};

pub const INITIAL_FEN: &str = "rnbqkbnr/pppppppp/8/8/8/8/PPPPPPPP/RNBQKBNR w KQkq - 0 1";

/// Parses a FEN string into an unchecked position. The clock fields may be
/// omitted and default to `0 1`.
pub fn parse_position(fen: &str) -> Result<Position, ParseError> {
    let err = |msg: &str| ParseError::Fen(format!("{msg} in `{fen}`"));
    let fields: Vec<&str> = fen.split_whitespace().collect();
    if fields.len() != 4 && fields.len() != 6 {
        return Err(err("expected 4 or 6 fields"));
    }
    let side = match fields[1] {
        "w" => Color::White,
        "b" => Color::Black,
        _ => return Err(err("bad side to move")),
    };
    let mut pos = Position::empty(side);

    let ranks: Vec<&str> = fields[0].split('/').collect();
    if ranks.len() != 8 {
        return Err(err("expected 8 ranks"));
    }
    for (i, row) in ranks.iter().enumerate() {
        let rank = 7 - i as u8;
        let mut file = 0u8;
        for c in row.chars() {
            if let Some(d) = c.to_digit(10) {
                if !(1..=8).contains(&d) {
                    return Err(err("bad empty-square count"));
                }
                file += d as u8;
            } else {
                let piece = Piece::from_fen_char(c).ok_or_else(|| err("bad piece letter"))?;
                let sq = Square::new(file, rank).ok_or_else(|| err("rank overflow"))?;
                pos.put(sq, piece);
                file += 1;
            }
            if file > 8 {
                return Err(err("rank overflow"));
            }
        }
        if file != 8 {
            return Err(err("short rank"));
        }
    }

    let mut castling = 0u8;
    if fields[2] != "-" {
        for c in fields[2].chars() {
            castling |= match c {
                'K' => CastlingRights::WHITE_KING,
                'Q' => CastlingRights::WHITE_QUEEN,
                'k' => CastlingRights::BLACK_KING,
                'q' => CastlingRights::BLACK_QUEEN,
                _ => return Err(err("bad castling field")),
            };
        }
    }
    pos.set_castling(CastlingRights::from_bits(castling));

    let ep = match fields[3] {
        "-" => None,
        s => Some(s.parse::<Square>().map_err(|_| err("bad en-passant square"))?),
    };
    pos.set_en_passant(ep);

    if fields.len() == 6 {
        let half = fields[4].parse().map_err(|_| err("bad halfmove clock"))?;
        let full = fields[5].parse().map_err(|_| err("bad fullmove number"))?;
        pos.set_clocks(half, full);
    }
    Ok(pos)
}

pub fn format_position(pos: &Position) -> String {
    let mut out = String::with_capacity(90);
    for rank in (0..8).rev() {
        let mut empty = 0;
        for file in 0..8 {
            let sq = Square::new(file, rank).expect("on board");
            match pos.piece_at(sq) {
                Some(p) => {
                    if empty > 0 {
                        out.push(char::from(b'0' + empty));
                        empty = 0;
                    }
                    out.push(p.fen_char());
                }
                None => empty += 1,
            }
        }
        if empty > 0 {
            out.push(char::from(b'0' + empty));
        }
        if rank > 0 {
            out.push('/');
        }
    }
    out.push(' ');
    out.push(match pos.side_to_move() {
        Color::White => 'w',
        Color::Black => 'b',
    });
    out.push(' ');
    let c = pos.castling();
    if c.bits() == 0 {
        out.push('-');
    } else {
        for (flag, ch) in c.as_array().into_iter().zip(['K', 'Q', 'k', 'q']) {
            if flag {
                out.push(ch);
            }
        }
    }
    out.push(' ');
    match pos.en_passant() {
        Some(sq) => out.push_str(&sq.to_string()),
        None => out.push('-'),
    }
    out.push_str(&format!(" {} {}", pos.halfmove_clock(), pos.fullmove_number()));
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip() {
        for fen in [
            INITIAL_FEN,
            "r3k2r/p1ppqpb1/bn2pnp1/3PN3/1p2P3/2N2Q1p/PPPBBPPP/R3K2R w KQkq - 0 1",
            "8/2p5/3p4/KP5r/1R3p1k/8/4P1P1/8 w - - 0 1",
            "rnbqkbnr/pppp1ppp/8/4p3/4P3/8/PPPP1PPP/RNBQKBNR w KQkq e6 0 2",
        ] {
            assert_eq!(format_position(&parse_position(fen).unwrap()), fen);
        }
    }

    #[test]
    fn rejects_garbage() {
        assert!(parse_position("").is_err());
        assert!(parse_position("rnbqkbnr/pppppppp/8/8/8/8/PPPPPPPP w KQkq - 0 1").is_err());
        assert!(parse_position("rnbqkbnr/pppppppp/9/8/8/8/PPPPPPPP/RNBQKBNR w KQkq - 0 1").is_err());
        assert!(parse_position("rnbqkbnr/pppppppp/8/8/8/8/PPPPPPPP/RNBQKBNR x KQkq - 0 1").is_err());
        assert!(parse_position("rnbqkbnr/pppppppp/8/8/8/8/PPPPPPPP/RNBQKBNR w KQkx - 0 1").is_err());
    }
}
